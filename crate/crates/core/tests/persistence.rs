use std::collections::BTreeMap;

use lgcav_core::cavtrain::{Cav, CavMode};
use lgcav_core::embedstore::{load_matrix, save_matrix};
use lgcav_core::synthbench::{SampleSize, SynthConfig, SynthWorld};
use lgcav_core::{ConceptSpec, DatasetManifest, EmbeddingMatrix, LinearHead, PairSet};
use proptest::prelude::*;
use tempfile::TempDir;

fn matrix() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..12, 1usize..9).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(-1e3f64..1e3, rows * cols).prop_map(move |data| {
            let ids = (0..rows).map(|i| format!("img_{i:03}")).collect();
            EmbeddingMatrix::new(ids, cols, data).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_round_trip_is_f32_exact(m in matrix()) {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("nested/m.bin");
        save_matrix(&m, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        prop_assert_eq!(&back, &m.quantized());
        // Saving what was read is lossless.
        save_matrix(&back, &path).unwrap();
        prop_assert_eq!(load_matrix(&path).unwrap(), back);
    }

    #[test]
    fn head_round_trip(w in matrix(), seed in any::<u64>()) {
        let biases: Vec<f64> = (0..w.rows()).map(|k| (seed.wrapping_mul(k as u64 + 1) % 1000) as f64 / 7.0).collect();
        let head = LinearHead::new(w.quantized(), biases).unwrap();
        let dir = TempDir::new().unwrap();
        let stem = dir.path().join("head");
        head.save(&stem, BTreeMap::new()).unwrap();
        prop_assert_eq!(LinearHead::load(&stem).unwrap(), head);
    }
}

#[test]
fn saved_world_reads_back_identically() {
    let cfg = SynthConfig {
        d_target: 16,
        d_vl: 24,
        n_images: 400,
        n_concepts: 4,
        head_epochs: 50,
        ..SynthConfig::default()
    };
    let world = SynthWorld::generate(&cfg).unwrap();
    assert_eq!(world, SynthWorld::generate(&cfg).unwrap());
    let specs = world.concept_specs(SampleSize::Count(10), 3).unwrap();
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    world.save(root, &specs).unwrap();

    assert_eq!(load_matrix(&root.join("target_features.bin")).unwrap(), world.target);
    assert_eq!(load_matrix(&root.join("vl_image_features.bin")).unwrap(), world.vl_img);
    assert_eq!(load_matrix(&root.join("similarity.bin")).unwrap(), world.similarity.quantized());
    assert_eq!(DatasetManifest::load(&root.join("manifest.json")).unwrap(), world.manifest);
    assert_eq!(PairSet::load(&root.join("pairs.json")).unwrap(), world.pairs);
    assert_eq!(LinearHead::load(&root.join("head")).unwrap(), world.head);
    for spec in &specs {
        let back = ConceptSpec::load(&root.join(format!("concepts/{}.json", spec.name))).unwrap();
        assert_eq!(&back, spec);
    }
}

#[test]
fn cav_round_trip_keeps_metadata() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("striped.cav");
    let cav = Cav {
        concept: "striped".into(),
        mode: CavMode::Combined,
        vector: vec![0.25, -1.5, 3.0e-7],
        bias: Some(-0.125),
        lambda: 0.5,
        seed: 9,
        trace: vec![1.0, 0.5],
        rejitters: 1,
    };
    cav.save(&stem).unwrap();
    let back = Cav::load(&stem.with_extension("json")).unwrap();
    let expected = Cav {
        vector: cav.vector.iter().map(|&v| f64::from(v as f32)).collect(),
        ..cav
    };
    assert_eq!(back, expected);
}
