use std::path::PathBuf;

use lgcav_core::embedstore::write_json;
use lgcav_core::synthbench::{ExperimentSettings, SynthConfig, SynthWorld};
use rayon::prelude::*;
use serde::Serialize;

use super::{seed_dir, ReportMeta};
use crate::config::{Command, DataPaths, RunConfig};
use crate::error::CliResult;
use crate::output::{OutputDir, Table};

#[derive(Debug, Clone, Serialize)]
pub struct WorldSummary {
    pub seed: u64,
    pub dir: String,
    pub images: usize,
    pub concepts: usize,
    pub classes: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub worlds: Vec<WorldSummary>,
}

/// A run config for the world just written, relative to its directory.
///
/// The training schedules come from [`ExperimentSettings`]: the default
/// schedules are sized for real backbone features and barely move on the
/// synthetic feature scale.
fn world_config(cfg: &RunConfig, seed: u64) -> RunConfig {
    let st = ExperimentSettings::default();
    let mut train = cfg.train.clone();
    train.learning_rate = st.cav_learning_rate;
    train.epochs = st.cav_epochs;
    let mut correct = cfg.correct.clone();
    correct.learning_rate = st.finetune_learning_rate;
    correct.epochs = st.finetune_epochs;
    RunConfig {
        train,
        correct,
        data: DataPaths {
            target_features: Some("target_features.bin".into()),
            vl_image_features: Some("vl_image_features.bin".into()),
            manifest: Some("manifest.json".into()),
            concepts: vec!["concepts".into()],
            head: Some("head".into()),
            similarity: Some("similarity.bin".into()),
            pairs: Some("pairs.json".into()),
        },
        cavs: None,
        out: PathBuf::from("run"),
        seeds: vec![seed],
        ..cfg.clone()
    }
}

/// One world per seed; a single seed writes straight into the output
/// directory, several seeds into `seed-<n>/` subdirectories.
pub(super) fn run(cfg: &RunConfig, out: &mut OutputDir) -> CliResult<()> {
    let worlds = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let world = SynthWorld::generate(&SynthConfig {
                seed,
                ..cfg.synth.world.clone()
            })?;
            let specs = world.concept_specs(cfg.synth.examples, seed)?;
            Ok((seed, world, specs))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut summaries = Vec::new();
    for (seed, world, specs) in &worlds {
        let dir = if cfg.seeds.len() == 1 {
            out.root().to_path_buf()
        } else {
            seed_dir(out.root(), *seed)
        };
        world.save(&dir, specs)?;
        let config_path = dir.join("config.json");
        write_json(&config_path, &world_config(cfg, *seed))?;
        out.record(config_path);
        summaries.push(WorldSummary {
            seed: *seed,
            dir: dir.strip_prefix(out.root()).unwrap_or(&dir).display().to_string(),
            images: world.target.rows(),
            concepts: world.concept_names.len(),
            classes: world.class_names.len(),
            pairs: world.pairs.pairs.len(),
        });
    }
    let report = SynthReport {
        meta: ReportMeta::new(Command::Synth, cfg),
        worlds: summaries,
    };
    let mut table = Table::new(["seed", "dir", "images", "concepts", "classes", "pairs"]);
    for w in &report.worlds {
        let dir = if w.dir.is_empty() { ".".to_string() } else { w.dir.clone() };
        table.row([
            w.seed.to_string(),
            dir,
            w.images.to_string(),
            w.concepts.to_string(),
            w.classes.to_string(),
            w.pairs.to_string(),
        ]);
    }
    out.json("synth.json", &report)?;
    out.text("synth.txt", &table.render())?;
    Ok(())
}
