//! Synthetic twin-feature-space worlds with planted concept directions, and
//! the experiments run on them.
//!
//! A world has a target space (the classifier's features) and a VL space
//! linked to it by an orthonormal embedding `Q`. Each concept `c` has a unit
//! direction `u_c` in the target space; its text embedding is `Q u_c` plus a
//! text-only offset, so the VL model "knows" every concept exactly up to
//! the cross-space noise. Image `i` has target features
//!
//! ```text
//! f_i = a_i m + sum_c z_ic u_c + [spurious] + k_i * nuisance * e_i
//! ```
//!
//! with a shared offset direction `m`, per-image clutter `k_i`, and VL
//! features `g_i = Q f_i/|f_i| + vl_offset * o_img + noise * k_i * n_i`.
//! All stored values are rounded through f32, so a world written to disk
//! and read back is identical to the in-memory one.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cavtrain::{plan_for_concept, train_cav, Cav, CavMode, GuidanceOptions, ProbeSource};
use crate::concepts::ProbeStrategy;
use crate::correction::{fine_tune_head, head_accuracy, train_head, AsrPlan};
use crate::embedstore::{
    save_matrix, write_json, ConceptClassPair, ConceptSpec, DatasetManifest, EmbeddingMatrix,
    LinearHead, ManifestItem, PairSet, PairSource, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{concept_accuracy, concept_to_class, decision_for, feature_rows};
use crate::numerics::{self, cosine, dot, norm, streams, BatchMode, Rng, SgdConfig};

/// A class whose training images carry an extra, concept-unrelated direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousConfig {
    pub class: usize,
    pub strength: f64,
    /// Probability that a training image of `class` carries the direction.
    pub class_rate: f64,
    /// Probability for training images of every other class.
    pub other_rate: f64,
    /// Probability for test and probe-pool images, independent of class.
    pub held_out_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d_target: usize,
    pub d_vl: usize,
    pub n_images: usize,
    pub n_concepts: usize,
    /// Cross-space disagreement: scale of independent noise in VL features.
    pub noise: f64,
    pub concept_strength: f64,
    /// Relative per-image jitter of the primary concept score.
    pub strength_jitter: f64,
    /// Probability that an image also shows a second concept.
    pub secondary_rate: f64,
    /// Magnitude of the offset shared by all target features.
    pub target_offset: f64,
    /// Relative per-image jitter of that offset.
    pub offset_jitter: f64,
    /// Scale of isotropic target-space noise.
    pub nuisance: f64,
    /// Log-std of the per-image clutter factor scaling both noise sources.
    pub clutter: f64,
    /// Image-only offset in VL space.
    pub vl_offset: f64,
    /// Text-only offset in VL space.
    pub text_offset: f64,
    /// Text component along the image offset (sets the VL cosine level).
    pub text_shared_offset: f64,
    /// Per-prompt noise around the concept's text embedding.
    pub prompt_noise: f64,
    pub n_prompts: usize,
    pub train_fraction: f64,
    pub test_fraction: f64,
    /// Ground-truth set size for recall.
    pub recall_truth: usize,
    pub head_learning_rate: f64,
    pub head_epochs: usize,
    pub spurious: Option<SpuriousConfig>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_target: 64,
            d_vl: 96,
            n_images: 2000,
            n_concepts: 8,
            noise: 0.3,
            concept_strength: 0.1,
            strength_jitter: 0.3,
            secondary_rate: 0.1,
            target_offset: 0.1,
            offset_jitter: 0.5,
            nuisance: 0.3,
            clutter: 0.4,
            vl_offset: 1.0,
            text_offset: 1.0,
            text_shared_offset: 0.5,
            prompt_noise: 0.5,
            n_prompts: 29,
            train_fraction: 0.3,
            test_fraction: 0.2,
            recall_truth: 50,
            head_learning_rate: 50.0,
            head_epochs: 500,
            spurious: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Target-space directions needed: concepts, offset, spurious.
    fn target_basis(&self) -> usize {
        self.n_concepts + 1 + usize::from(self.spurious.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d_target < 2 || self.d_vl < 2 {
            return bad("dimensions must be >= 2".into());
        }
        if self.n_concepts == 0 {
            return bad("need at least one concept".into());
        }
        if self.d_target < self.target_basis() {
            return bad(format!(
                "d_target = {} cannot hold {} orthogonal planted directions",
                self.d_target,
                self.target_basis()
            ));
        }
        if self.d_vl < self.d_target + 2 {
            return bad(format!(
                "d_vl = {} must be at least d_target + 2 = {}",
                self.d_vl,
                self.d_target + 2
            ));
        }
        if self.n_images < 4 * self.n_concepts {
            return bad(format!(
                "n_images = {} must be at least 4 * n_concepts = {}",
                self.n_images,
                4 * self.n_concepts
            ));
        }
        let nonneg = [
            ("noise", self.noise),
            ("strength_jitter", self.strength_jitter),
            ("target_offset", self.target_offset),
            ("offset_jitter", self.offset_jitter),
            ("nuisance", self.nuisance),
            ("clutter", self.clutter),
            ("vl_offset", self.vl_offset),
            ("text_offset", self.text_offset),
            ("text_shared_offset", self.text_shared_offset),
            ("prompt_noise", self.prompt_noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.concept_strength > 0.0 && self.concept_strength.is_finite()) {
            return bad("concept_strength must be positive".into());
        }
        let unit = [
            ("secondary_rate", self.secondary_rate),
            ("train_fraction", self.train_fraction),
            ("test_fraction", self.test_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.train_fraction + self.test_fraction > 1.0 {
            return bad("train_fraction + test_fraction exceeds 1".into());
        }
        if self.n_prompts == 0 {
            return bad("n_prompts must be >= 1".into());
        }
        if let Some(sp) = &self.spurious {
            if sp.class >= self.n_concepts {
                return bad(format!("spurious class {} out of range", sp.class));
            }
            for (name, v) in [
                ("class_rate", sp.class_rate),
                ("other_rate", sp.other_rate),
                ("held_out_rate", sp.held_out_rate),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("spurious {name} must lie in [0, 1], got {v}"));
                }
            }
        }
        SgdConfig {
            learning_rate: self.head_learning_rate,
            epochs: self.head_epochs,
            ..SgdConfig::default()
        }
        .validate()
    }
}

/// Number of training examples per side for a concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSize {
    /// Every training positive, with as many negatives.
    All,
    #[serde(untagged)]
    Count(usize),
}

impl std::fmt::Display for SampleSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleSize::All => f.write_str("all"),
            SampleSize::Count(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    pub target: EmbeddingMatrix,
    pub vl_img: EmbeddingMatrix,
    /// Per concept, `n_prompts` x `d_vl` prompt embeddings.
    pub prompts: Vec<EmbeddingMatrix>,
    /// Planted unit direction of each concept in the target space.
    pub directions: Vec<Vec<f64>>,
    pub spurious_direction: Option<Vec<f64>>,
    /// `presence[i][c]`: image `i` shows concept `c`.
    pub presence: Vec<Vec<bool>>,
    pub manifest: DatasetManifest,
    pub head: LinearHead,
    /// Concepts x classes relatedness.
    pub similarity: EmbeddingMatrix,
    pub pairs: PairSet,
}

fn gaussian_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gram-Schmidt (applied twice for stability) on `count` random vectors.
fn random_orthonormal(rng: &mut Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, dim);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

impl SynthWorld {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = numerics::rng(cfg.seed, streams::WORLD);
        let (d, dv, n, c_count) = (cfg.d_target, cfg.d_vl, cfg.n_images, cfg.n_concepts);

        let mut tb = random_orthonormal(&mut rng, d, cfg.target_basis());
        let spurious_direction = cfg.spurious.is_some().then(|| tb.pop().expect("basis"));
        let offset_dir = tb.pop().expect("basis");
        let directions = tb;
        // Columns of Q, then the image and text offsets in its complement.
        let mut vb = random_orthonormal(&mut rng, dv, d + 2);
        let o_txt = vb.pop().expect("basis");
        let o_img = vb.pop().expect("basis");
        let q = vb;
        let embed = |x: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; dv];
            for (xi, col) in x.iter().zip(&q) {
                out.iter_mut().zip(col).for_each(|(o, c)| *o += xi * c);
            }
            out
        };

        let names: Vec<String> = (0..c_count).map(|c| format!("concept_{c:02}")).collect();
        let class_names: Vec<String> = (0..c_count).map(|c| format!("class_{c:02}")).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("img_{i:05}")).collect();

        let mut labels: Vec<usize> = (0..n).map(|i| i % c_count).collect();
        labels.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_train = (cfg.train_fraction * n as f64).round() as usize;
        let n_test = (cfg.test_fraction * n as f64).round() as usize;
        let mut splits = vec![Split::ProbePool; n];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_train {
                splits[i] = Split::Train;
            } else if rank < n_train + n_test {
                splits[i] = Split::Test;
            }
        }

        let jitter = Normal::new(0.0, cfg.strength_jitter.max(0.0)).expect("std >= 0");
        let clutter = Normal::new(0.0, cfg.clutter).expect("std >= 0");
        let noise_t = (1.0 / d as f64).sqrt();
        let noise_v = (1.0 / dv as f64).sqrt();
        let mut target = Vec::with_capacity(n * d);
        let mut vl = Vec::with_capacity(n * dv);
        let mut presence = Vec::with_capacity(n);
        for i in 0..n {
            let mut f = vec![0.0; d];
            let mut present = vec![false; c_count];
            let add = |f: &mut Vec<f64>, dir: &[f64], s: f64| {
                f.iter_mut().zip(dir).for_each(|(x, u)| *x += s * u);
            };
            let primary = cfg.concept_strength * (1.0 + jitter.sample(&mut rng)).max(0.2);
            add(&mut f, &directions[labels[i]], primary);
            present[labels[i]] = true;
            if c_count > 1 && rng.random::<f64>() < cfg.secondary_rate {
                let mut other = rng.random_range(0..c_count - 1);
                if other >= labels[i] {
                    other += 1;
                }
                let s = cfg.concept_strength * rng.random_range(0.5..1.0);
                add(&mut f, &directions[other], s);
                present[other] = true;
            }
            let a = cfg.target_offset * (1.0 + cfg.offset_jitter * rng.random_range(-1.0..1.0));
            add(&mut f, &offset_dir, a);
            if let (Some(sp), Some(dir)) = (&cfg.spurious, &spurious_direction) {
                let rate = match splits[i] {
                    Split::Train if labels[i] == sp.class => sp.class_rate,
                    Split::Train => sp.other_rate,
                    _ => sp.held_out_rate,
                };
                if rng.random::<f64>() < rate {
                    add(&mut f, dir, sp.strength);
                }
            }
            let k = clutter.sample(&mut rng).exp();
            let eps = gaussian_vec(&mut rng, d);
            f.iter_mut()
                .zip(&eps)
                .for_each(|(x, e)| *x += k * cfg.nuisance * noise_t * e);
            let f: Vec<f64> = f.into_iter().map(f32_round).collect();

            let fnorm = norm(&f);
            let unit: Vec<f64> = f.iter().map(|x| x / fnorm).collect();
            let mut g = embed(&unit);
            let eta = gaussian_vec(&mut rng, dv);
            for ((x, o), e) in g.iter_mut().zip(&o_img).zip(&eta) {
                *x += cfg.vl_offset * o + cfg.noise * k * noise_v * e;
            }
            target.extend(f);
            vl.extend(g.into_iter().map(f32_round));
            presence.push(present);
        }
        let target = EmbeddingMatrix::new(ids.clone(), d, target)?;
        let vl_img = EmbeddingMatrix::new(ids.clone(), dv, vl)?;

        let prompt_ids: Vec<String> = (0..cfg.n_prompts).map(|p| format!("p{p:02}")).collect();
        let mut prompts = Vec::with_capacity(c_count);
        for u in &directions {
            let mut text = embed(u);
            for ((x, t), s) in text.iter_mut().zip(&o_txt).zip(&o_img) {
                *x += cfg.text_offset * t + cfg.text_shared_offset * s;
            }
            let mut data = Vec::with_capacity(cfg.n_prompts * dv);
            for _ in 0..cfg.n_prompts {
                let z = gaussian_vec(&mut rng, dv);
                data.extend(
                    text.iter()
                        .zip(&z)
                        .map(|(t, z)| f32_round(t + cfg.prompt_noise * noise_v * z)),
                );
            }
            prompts.push(EmbeddingMatrix::new(prompt_ids.clone(), dv, data)?);
        }

        let manifest = DatasetManifest {
            class_names: class_names.clone(),
            items: ids
                .iter()
                .zip(&labels)
                .zip(&splits)
                .map(|((id, &label), &split)| ManifestItem {
                    id: id.clone(),
                    label: Some(label),
                    split,
                })
                .collect(),
        };

        let zero = EmbeddingMatrix::new(class_names.clone(), d, vec![0.0; c_count * d])?;
        let head0 = LinearHead::new(zero, vec![0.0; c_count])?;
        let train = manifest.labelled(Split::Train);
        let head_sgd = SgdConfig {
            learning_rate: cfg.head_learning_rate,
            epochs: cfg.head_epochs,
            batch: BatchMode::Full,
            seed: cfg.seed,
        };
        let fitted = train_head(&head0, &target, &train, &head_sgd)?.head;
        let head = LinearHead::new(fitted.weights.quantized(), fitted.biases)?;

        let mut sim = vec![0.2; c_count * c_count];
        for c in 0..c_count {
            sim[c * c_count + c] = 0.8;
        }
        let similarity = EmbeddingMatrix::new(names.clone(), c_count, sim)?.quantized();
        let pairs = PairSet {
            source: PairSource::Explicit,
            pairs: names
                .iter()
                .enumerate()
                .map(|(c, name)| ConceptClassPair {
                    concept: name.clone(),
                    class: c,
                })
                .collect(),
        };

        Ok(Self {
            config: cfg.clone(),
            concept_names: names,
            class_names,
            target,
            vl_img,
            prompts,
            directions,
            spurious_direction,
            presence,
            manifest,
            head,
            similarity,
            pairs,
        })
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.manifest.ids_in(split)
    }

    fn split_rows(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.items.len())
            .filter(|&i| self.manifest.items[i].split == split)
            .collect()
    }

    /// Ground-truth activation of concept `c` on every image.
    pub fn true_activations(&self, c: usize) -> Vec<f64> {
        self.target
            .iter_rows()
            .map(|f| dot(&self.directions[c], f) / norm(f))
            .collect()
    }

    /// The images best matching concept `c` by its planted direction.
    fn recall_truth(&self, c: usize) -> Vec<String> {
        let acts = self.true_activations(c);
        let ids = self.target.ids();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| acts[b].total_cmp(&acts[a]).then_with(|| ids[a].cmp(&ids[b])));
        order
            .into_iter()
            .take(self.config.recall_truth.min(ids.len()))
            .map(|i| ids[i].clone())
            .collect()
    }

    /// Largest per-side training sample available for every concept.
    pub fn max_examples(&self) -> usize {
        let train = self.split_rows(Split::Train);
        (0..self.concept_names.len())
            .map(|c| {
                let pos = train.iter().filter(|&&i| self.presence[i][c]).count();
                pos.min(train.len() - pos)
            })
            .min()
            .unwrap_or(0)
    }

    /// Concept specs with sampled training examples, balanced test sets and
    /// recall ground truth. Pure in `(world, size, seed)`.
    pub fn concept_specs(&self, size: SampleSize, seed: u64) -> Result<Vec<ConceptSpec>> {
        let mut rng = numerics::rng(seed, streams::EXAMPLES);
        let ids = self.target.ids();
        let train = self.split_rows(Split::Train);
        let test = self.split_rows(Split::Test);
        let mut specs = Vec::with_capacity(self.concept_names.len());
        for (c, name) in self.concept_names.iter().enumerate() {
            let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
                train.iter().partition(|&&i| self.presence[i][c]);
            let n = match size {
                SampleSize::All => pos.len(),
                SampleSize::Count(n) => n,
            };
            if n == 0 || n > pos.len() || n > neg.len() {
                return Err(Error::InvalidArgument(format!(
                    "{name}: {n} examples per side requested, {} positives and {} negatives available",
                    pos.len(),
                    neg.len()
                )));
            }
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let (tpos, mut tneg): (Vec<usize>, Vec<usize>) = test.iter().partition(|&&i| self.presence[i][c]);
            tneg.shuffle(&mut rng);
            tneg.truncate(tpos.len());
            let to_ids = |rows: &[usize]| rows.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
            let mut spec = ConceptSpec::new(name.clone(), self.prompts[c].clone())?
                .with_examples(to_ids(&pos[..n]), to_ids(&neg[..n]))?;
            spec.test_positives = Some(to_ids(&tpos));
            spec.test_negatives = Some(to_ids(&tneg));
            spec.recall_truth = Some(self.recall_truth(c));
            specs.push(spec);
        }
        Ok(specs)
    }

    /// Writes the world in the on-disk formats the CLI reads.
    pub fn save(&self, dir: &Path, specs: &[ConceptSpec]) -> Result<()> {
        save_matrix(&self.target, &dir.join("target_features.bin"))?;
        save_matrix(&self.vl_img, &dir.join("vl_image_features.bin"))?;
        save_matrix(&self.similarity, &dir.join("similarity.bin"))?;
        self.manifest.save(&dir.join("manifest.json"))?;
        self.pairs.save(&dir.join("pairs.json"))?;
        let mut provenance = std::collections::BTreeMap::new();
        provenance.insert("source".to_string(), serde_json::json!("synthetic"));
        provenance.insert("seed".to_string(), serde_json::json!(self.config.seed));
        self.head.save(&dir.join("head"), provenance)?;
        for spec in specs {
            let prompts = format!("{}.prompts.bin", spec.name);
            save_matrix(&spec.prompts, &dir.join("concepts").join(&prompts))?;
            spec.save(&dir.join("concepts").join(format!("{}.json", spec.name)), &prompts)?;
        }
        write_json(
            &dir.join("ground_truth.json"),
            &GroundTruth {
                config: self.config.clone(),
                concepts: self.concept_names.clone(),
                directions: self.directions.clone(),
                spurious_direction: self.spurious_direction.clone(),
            },
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruth {
    config: SynthConfig,
    concepts: Vec<String>,
    directions: Vec<Vec<f64>>,
    spurious_direction: Option<Vec<f64>>,
}

/// CAV variants compared by the quality experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Classification loss only.
    Original,
    /// Plus raw VL activation matching on a single prompt.
    Ours,
    /// Plus Gaussian alignment.
    OursGa,
    /// Plus the prompt ensemble.
    OursGaCe,
    /// Plus deviation reweighting.
    OursGaCeDsr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Original,
        Variant::Ours,
        Variant::OursGa,
        Variant::OursGaCe,
        Variant::OursGaCeDsr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Ours => "ours",
            Variant::OursGa => "ours+ga",
            Variant::OursGaCe => "ours+ga+ce",
            Variant::OursGaCeDsr => "ours+ga+ce+dsr",
        }
    }

    pub fn guidance(self, lambda: f64) -> Option<GuidanceOptions> {
        let (ce, ga, dsr) = match self {
            Variant::Original => return None,
            Variant::Ours => (false, false, false),
            Variant::OursGa => (false, true, false),
            Variant::OursGaCe => (true, true, false),
            Variant::OursGaCeDsr => (true, true, true),
        };
        Some(GuidanceOptions {
            concept_ensemble: ce,
            gaussian_alignment: ga,
            deviation_reweighting: dsr,
            lambda,
        })
    }
}

/// Training knobs shared by every experiment run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub cav_learning_rate: f64,
    pub cav_epochs: usize,
    /// Probe count |R|.
    pub probes: usize,
    pub probe_strategy: ProbeStrategy,
    pub pair_cap: usize,
    pub lambda: f64,
    /// Training examples per side for CAVs in the correction experiment.
    pub examples: usize,
    pub finetune_learning_rate: f64,
    pub finetune_epochs: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            cav_learning_rate: 0.5,
            cav_epochs: 200,
            probes: 1000,
            probe_strategy: ProbeStrategy::Activation,
            pair_cap: crate::cavtrain::DEFAULT_PAIR_CAP,
            lambda: 1.0,
            examples: 10,
            finetune_learning_rate: 5.0,
            finetune_epochs: 50,
        }
    }
}

impl ExperimentSettings {
    fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            learning_rate: self.cav_learning_rate,
            epochs: self.cav_epochs,
            batch: BatchMode::Full,
            seed,
        }
    }
}

/// Trains one CAV of `variant` for concept `c` of `world`.
pub fn train_variant(
    world: &SynthWorld,
    spec: &ConceptSpec,
    variant: Variant,
    mode: CavMode,
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<Cav> {
    let sgd = settings.sgd(seed);
    match variant.guidance(settings.lambda) {
        None => train_cav(CavMode::Original, spec, &world.target, None, &sgd),
        Some(opts) => {
            let pool = world.ids_in(Split::ProbePool);
            let src = ProbeSource {
                target: &world.target,
                vl_img: &world.vl_img,
                pool: &pool,
                count: settings.probes,
                strategy: settings.probe_strategy,
                pair_cap: settings.pair_cap,
                seed,
            };
            let plan = plan_for_concept(spec, &src, &opts)?;
            train_cav(mode, spec, &world.target, Some(&plan), &sgd)
        }
    }
}

/// Quality of one CAV against the world's ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavScore {
    pub accuracy: f64,
    pub concept_to_class: f64,
    pub cos_to_truth: f64,
}

pub fn score_cav(world: &SynthWorld, spec: &ConceptSpec, cav: &Cav, c: usize) -> Result<CavScore> {
    let t = &world.target;
    let rows = |ids: &Option<Vec<String>>| feature_rows(t, ids.as_deref().unwrap_or_default());
    let (pos, neg) = (rows(&spec.positives)?, rows(&spec.negatives)?);
    let decision = decision_for(cav, Some((&pos, &neg)))?;
    let accuracy = concept_accuracy(&cav.vector, decision, &rows(&spec.test_positives)?, &rows(&spec.test_negatives)?)?;
    Ok(CavScore {
        accuracy,
        concept_to_class: concept_to_class(&cav.vector, &world.head, c)?,
        cos_to_truth: cosine(&cav.vector, &world.directions[c])?,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub samples: SampleSize,
    pub variant: Variant,
    pub accuracy: Summary,
    pub concept_to_class: Summary,
    pub cos_to_truth: Summary,
    /// Per seed, the mean over concepts (seed order as given).
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_cos_to_truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<QualityRow>,
}

impl QualityTable {
    pub fn row(&self, samples: SampleSize, variant: Variant) -> Option<&QualityRow> {
        self.rows.iter().find(|r| r.samples == samples && r.variant == variant)
    }
}

/// Mean score over concepts for each (size, variant), for one seed.
fn quality_for_seed(
    cfg: &SynthConfig,
    samples: &[SampleSize],
    variants: &[Variant],
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<Vec<Vec<CavScore>>> {
    let world = SynthWorld::generate(&SynthConfig { seed, ..cfg.clone() })?;
    let mut out = Vec::new();
    for &size in samples {
        let specs = world.concept_specs(size, seed)?;
        for &variant in variants {
            let scores = specs
                .par_iter()
                .enumerate()
                .map(|(c, spec)| {
                    let cav = train_variant(&world, spec, variant, CavMode::Combined, settings, seed)?;
                    score_cav(&world, spec, &cav, c)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(scores);
        }
    }
    Ok(out)
}

fn mean_of(scores: &[CavScore], f: impl Fn(&CavScore) -> f64) -> f64 {
    scores.iter().map(f).sum::<f64>() / scores.len() as f64
}

/// CAV quality versus training-set size for each variant, one fresh world
/// per seed. Guided variants use combined mode.
pub fn run_quality_experiment(
    cfg: &SynthConfig,
    samples: &[SampleSize],
    variants: &[Variant],
    seeds: &[u64],
    settings: &ExperimentSettings,
) -> Result<QualityTable> {
    let per_seed = seeds
        .par_iter()
        .map(|&s| quality_for_seed(cfg, samples, variants, settings, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (si, &size) in samples.iter().enumerate() {
        for (vi, &variant) in variants.iter().enumerate() {
            let cell = si * variants.len() + vi;
            let acc: Vec<f64> = per_seed.iter().map(|s| mean_of(&s[cell], |x| x.accuracy)).collect();
            let c2c: Vec<f64> = per_seed.iter().map(|s| mean_of(&s[cell], |x| x.concept_to_class)).collect();
            let cos: Vec<f64> = per_seed.iter().map(|s| mean_of(&s[cell], |x| x.cos_to_truth)).collect();
            rows.push(QualityRow {
                samples: size,
                variant,
                accuracy: Summary::of(&acc),
                concept_to_class: Summary::of(&c2c),
                cos_to_truth: Summary::of(&cos),
                per_seed_accuracy: acc,
                per_seed_cos_to_truth: cos,
            });
        }
    }
    Ok(QualityTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweepRow {
    pub strategy: ProbeStrategy,
    pub probes: usize,
    pub accuracy: Summary,
    pub cos_to_truth: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweepTable {
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub rows: Vec<ProbeSweepRow>,
}

impl ProbeSweepTable {
    /// `(probes, mean accuracy)` for one strategy, in grid order.
    pub fn curve(&self, strategy: ProbeStrategy) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| (r.probes, r.accuracy.mean))
            .collect()
    }
}

/// Drops repeated grid values, keeping first occurrences in order.
pub fn dedup_grid<T: PartialEq + Copy>(grid: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(grid.len());
    for &g in grid {
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

/// Accuracy of `variant` as a function of probe strategy and count.
pub fn run_probe_sweep(
    cfg: &SynthConfig,
    strategies: &[ProbeStrategy],
    counts: &[usize],
    variant: Variant,
    seeds: &[u64],
    settings: &ExperimentSettings,
) -> Result<ProbeSweepTable> {
    let strategies = dedup_grid(strategies);
    let counts = dedup_grid(counts);
    let grid: Vec<(ProbeStrategy, usize)> = strategies
        .iter()
        .flat_map(|&s| counts.iter().map(move |&c| (s, c)))
        .collect();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, f64)>> {
            let world = SynthWorld::generate(&SynthConfig { seed, ..cfg.clone() })?;
            let specs = world.concept_specs(SampleSize::Count(settings.examples), seed)?;
            grid.par_iter()
                .map(|&(strategy, probes)| {
                    let st = ExperimentSettings {
                        probes,
                        probe_strategy: strategy,
                        ..*settings
                    };
                    let scores = specs
                        .iter()
                        .enumerate()
                        .map(|(c, spec)| {
                            let cav = train_variant(&world, spec, variant, CavMode::Combined, &st, seed)?;
                            score_cav(&world, spec, &cav, c)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((mean_of(&scores, |x| x.accuracy), mean_of(&scores, |x| x.cos_to_truth)))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = grid
        .iter()
        .enumerate()
        .map(|(g, &(strategy, probes))| {
            let acc: Vec<f64> = per_seed.iter().map(|s| s[g].0).collect();
            let cos: Vec<f64> = per_seed.iter().map(|s| s[g].1).collect();
            ProbeSweepRow {
                strategy,
                probes,
                accuracy: Summary::of(&acc),
                cos_to_truth: Summary::of(&cos),
            }
        })
        .collect();
    Ok(ProbeSweepTable {
        seeds: seeds.to_vec(),
        variant,
        rows,
    })
}

/// First grid point after which every further step gains less than `tol`.
///
/// `curve` is `(x, y)` in increasing `x`. Returns `None` for an empty curve.
pub fn saturation_point(curve: &[(usize, f64)], tol: f64) -> Option<usize> {
    let mut sat = curve.len().checked_sub(1)?;
    while sat > 0 && curve[sat].1 - curve[sat - 1].1 < tol {
        sat -= 1;
    }
    Some(curve[sat].0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub seed: u64,
    pub before: f64,
    pub after_asr: f64,
    pub after_uniform: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTable {
    pub rows: Vec<CorrectionRow>,
    pub improved_asr: usize,
    pub improved_uniform: usize,
}

/// Held-out accuracy of one correction run.
pub fn correction_for_seed(cfg: &SynthConfig, settings: &ExperimentSettings, seed: u64) -> Result<CorrectionRow> {
    let world = SynthWorld::generate(&SynthConfig { seed, ..cfg.clone() })?;
    let specs = world.concept_specs(SampleSize::Count(settings.examples), seed)?;
    let cavs = specs
        .par_iter()
        .map(|spec| train_variant(&world, spec, Variant::OursGaCeDsr, CavMode::Lg, settings, seed))
        .collect::<Result<Vec<_>>>()?;
    let train = world.manifest.labelled(Split::Train);
    let test = world.manifest.labelled(Split::Test);
    let assignments: Vec<(usize, &Cav)> = world
        .pairs
        .pairs
        .iter()
        .map(|p| {
            let c = world.concept_names.iter().position(|n| *n == p.concept).expect("world pair");
            (p.class, &cavs[c])
        })
        .collect();
    let (epochs, lr) = (settings.finetune_epochs, settings.finetune_learning_rate);
    let asr = AsrPlan::build(&assignments, &world.target, &train, epochs, lr, seed)?;
    let uniform = AsrPlan::uniform(epochs, lr, seed);
    let tuned = fine_tune_head(&world.head, &world.target, &train, &asr)?.head;
    let plain = fine_tune_head(&world.head, &world.target, &train, &uniform)?.head;
    Ok(CorrectionRow {
        seed,
        before: head_accuracy(&world.head, &world.target, &test)?,
        after_asr: head_accuracy(&tuned, &world.target, &test)?,
        after_uniform: head_accuracy(&plain, &world.target, &test)?,
    })
}

/// ASR fine-tuning with LG CAVs versus the untouched head and a uniform-weight control.
pub fn run_correction_experiment(cfg: &SynthConfig, seeds: &[u64], settings: &ExperimentSettings) -> Result<CorrectionTable> {
    if cfg.spurious.is_none() {
        return Err(Error::InvalidArgument(
            "correction experiment needs a world with a spurious class".into(),
        ));
    }
    let rows = seeds
        .par_iter()
        .map(|&s| correction_for_seed(cfg, settings, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrectionTable {
        improved_asr: rows.iter().filter(|r| r.after_asr > r.before).count(),
        improved_uniform: rows.iter().filter(|r| r.after_uniform > r.before).count(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            d_target: 16,
            d_vl: 24,
            n_images: 400,
            n_concepts: 4,
            head_epochs: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = [
            SynthConfig { d_target: 1, ..small() },
            SynthConfig { d_vl: 17, ..small() },
            SynthConfig { n_images: 15, ..small() },
            SynthConfig { noise: -1.0, ..small() },
            SynthConfig { train_fraction: 0.9, test_fraction: 0.2, ..small() },
            SynthConfig { d_target: 4, ..small() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = SynthWorld::generate(&small()).unwrap();
        let b = SynthWorld::generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = SynthWorld::generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn values_survive_f32_storage() {
        let w = SynthWorld::generate(&small()).unwrap();
        assert_eq!(w.target.quantized(), w.target);
        assert_eq!(w.vl_img.quantized(), w.vl_img);
        assert_eq!(w.head.weights.quantized(), w.head.weights);
    }

    #[test]
    fn noiseless_vl_ranks_like_ground_truth() {
        let w = SynthWorld::generate(&SynthConfig { noise: 0.0, prompt_noise: 0.0, ..small() }).unwrap();
        for c in 0..w.concept_names.len() {
            let truth = w.true_activations(c);
            let text = w.prompts[c].row(0);
            let vl: Vec<f64> = w.vl_img.iter_rows().map(|g| cosine(text, g).unwrap()).collect();
            let rank = |xs: &[f64]| {
                let mut o: Vec<usize> = (0..xs.len()).collect();
                o.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
                o
            };
            // f32 storage can swap near-ties; compare with a tolerance.
            let (rv, rt) = (rank(&vl), rank(&truth));
            let swapped = rv.iter().zip(&rt).filter(|(a, b)| a != b).count();
            assert!(swapped <= 4, "concept {c}: {swapped} rank differences");
        }
    }

    #[test]
    fn noiseless_probe_selection_matches_ground_truth() {
        let w = SynthWorld::generate(&SynthConfig { noise: 0.0, prompt_noise: 0.0, ..small() }).unwrap();
        let pool = w.ids_in(Split::ProbePool);
        for c in 0..w.concept_names.len() {
            let by_vl = crate::concepts::select_probes(&w.vl_img, w.prompts[c].row(0), &pool, 20).unwrap();
            let target_as_vl = EmbeddingMatrix::new(w.target.ids().to_vec(), w.target.cols(), w.target.data().to_vec()).unwrap();
            let by_truth = crate::concepts::select_probes(&target_as_vl, &w.directions[c], &pool, 20).unwrap();
            let mut a = by_vl.clone();
            let mut b = by_truth.clone();
            a.sort();
            b.sort();
            let common = a.iter().filter(|x| b.contains(x)).count();
            assert!(common >= 38, "concept {c}: {common}/40 shared");
        }
    }

    #[test]
    fn single_concept_geometry() {
        let cfg = SynthConfig {
            d_target: 2,
            d_vl: 4,
            n_images: 8,
            n_concepts: 1,
            concept_strength: 1.0,
            target_offset: 1.0,
            nuisance: 0.0,
            noise: 0.0,
            prompt_noise: 0.0,
            secondary_rate: 0.0,
            strength_jitter: 0.0,
            offset_jitter: 0.0,
            clutter: 0.0,
            head_epochs: 1,
            ..SynthConfig::default()
        };
        let w = SynthWorld::generate(&cfg).unwrap();
        // u and m are orthonormal; every image is u + m.
        assert!((norm(&w.directions[0]) - 1.0).abs() < 1e-12);
        for f in w.target.iter_rows() {
            assert!((norm(f) - 2f64.sqrt()).abs() < 1e-6);
            assert!((dot(f, &w.directions[0]) - 1.0).abs() < 1e-6);
        }
        // VL: |Q f/|f|| = 1 and the image offset is orthogonal to it.
        for g in w.vl_img.iter_rows() {
            assert!((norm(g) - 2f64.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn concept_specs_are_balanced_and_disjoint() {
        let w = SynthWorld::generate(&small()).unwrap();
        let specs = w.concept_specs(SampleSize::Count(10), 3).unwrap();
        assert_eq!(specs, w.concept_specs(SampleSize::Count(10), 3).unwrap());
        for s in &specs {
            s.validate().unwrap();
            assert_eq!(s.positives.as_ref().unwrap().len(), 10);
            assert_eq!(s.test_positives.as_ref().unwrap().len(), s.test_negatives.as_ref().unwrap().len());
        }
        let max = w.max_examples();
        assert!(w.concept_specs(SampleSize::Count(max), 0).is_ok());
        assert!(w.concept_specs(SampleSize::Count(10_000), 0).is_err());
        assert!(w.concept_specs(SampleSize::All, 0).is_ok());
    }

    #[test]
    fn saturation_examples() {
        let c = [(10, 0.5), (20, 0.7), (40, 0.75), (80, 0.755), (160, 0.758)];
        assert_eq!(saturation_point(&c, 0.01), Some(40));
        assert_eq!(saturation_point(&c, 0.1), Some(20));
        assert_eq!(saturation_point(&[(1, 0.0), (2, 1.0)], 0.01), Some(2));
        assert_eq!(saturation_point(&[], 0.01), None);
    }

    #[test]
    fn grid_dedup_keeps_order() {
        assert_eq!(dedup_grid(&[4, 2, 4, 8, 2]), vec![4, 2, 8]);
    }

    #[test]
    fn sample_size_serde() {
        assert_eq!(serde_json::to_string(&SampleSize::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::to_string(&SampleSize::Count(10)).unwrap(), "10");
        assert_eq!(serde_json::from_str::<SampleSize>("10").unwrap(), SampleSize::Count(10));
        assert_eq!(serde_json::from_str::<SampleSize>("\"all\"").unwrap(), SampleSize::All);
    }
}
