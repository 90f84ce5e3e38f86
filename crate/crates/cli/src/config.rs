//! The JSON run config shared by every command.
//!
//! Paths are relative to the config file's directory. Every field has a
//! default, so a config only needs the keys it changes; unknown keys are
//! rejected to catch typos.

use std::fmt;
use std::path::{Path, PathBuf};

use lgcav_core::cavtrain::DEFAULT_PAIR_CAP;
use lgcav_core::concepts::ProbeStrategy;
use lgcav_core::metrics::DEFAULT_RECALL_K;
use lgcav_core::synthbench::{SampleSize, SynthConfig, Variant};
use lgcav_core::{BatchMode, CavMode, GuidanceOptions};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    /// Directory of trained CAVs read by `eval` and `correct`; defaults to
    /// `<out>/cavs`, where `train` writes them.
    pub cavs: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub correct: CorrectSection,
    pub synth: SynthSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            cavs: None,
            out: PathBuf::from("out"),
            seeds: vec![0],
            train: TrainSection::default(),
            eval: EvalSection::default(),
            correct: CorrectSection::default(),
            synth: SynthSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub target_features: Option<PathBuf>,
    pub vl_image_features: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Concept spec files, or directories whose `*.json` files are specs.
    pub concepts: Vec<PathBuf>,
    /// Head stem: `<head>.bin` holds the weights, `<head>.json` the biases.
    pub head: Option<PathBuf>,
    /// Concepts x classes similarity matrix, thresholded at `eval.epsilon`.
    pub similarity: Option<PathBuf>,
    /// Explicit pair set; takes precedence over `similarity`.
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: CavMode,
    /// Probe images |R| per concept (half most, half least activated).
    pub probes: usize,
    pub probe_strategy: ProbeStrategy,
    pub pair_cap: usize,
    /// Training positives and negatives used per concept.
    pub examples: usize,
    pub guidance: GuidanceOptions,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: BatchMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: CavMode::Combined,
            probes: 1000,
            probe_strategy: ProbeStrategy::Activation,
            pair_cap: DEFAULT_PAIR_CAP,
            examples: 10,
            guidance: GuidanceOptions::default(),
            learning_rate: 1e-3,
            epochs: 10,
            batch: BatchMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Similarity threshold for concept-class pairs.
    pub epsilon: f64,
    pub recall_k: usize,
    /// `true` makes missing head/pair inputs an error; `false` skips the
    /// head metrics; unset computes them when the inputs are present.
    pub concept_to_class: Option<bool>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            epsilon: 0.6,
            recall_k: DEFAULT_RECALL_K,
            concept_to_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectSection {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Also fine-tune with uniform weights as a control.
    pub uniform_control: bool,
}

impl Default for CorrectSection {
    fn default() -> Self {
        Self {
            epochs: lgcav_core::correction::DEFAULT_EPOCHS,
            learning_rate: lgcav_core::correction::DEFAULT_LEARNING_RATE,
            uniform_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub world: SynthConfig,
    /// Training positives/negatives written into each concept spec.
    pub examples: SampleSize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            world: SynthConfig::default(),
            examples: SampleSize::Count(10),
        }
    }
}

/// Grid for `sweep`; empty `lambdas` means just `train.guidance.lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub strategies: Vec<ProbeStrategy>,
    pub probes: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            strategies: vec![ProbeStrategy::Activation, ProbeStrategy::Random],
            probes: vec![100, 250, 500, 1000],
            lambdas: Vec::new(),
        }
    }
}

/// Which command is about to run; decides which inputs are required.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Correct,
    Synth,
    Sweep,
    Probes,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Correct => "correct",
            Command::Synth => "synth",
            Command::Sweep => "sweep",
            Command::Probes => "probes",
        })
    }
}

impl RunConfig {
    /// Reads a config; relative paths stay as written and are resolved
    /// against `base` at use.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Every problem with this config for `cmd`, not just the first.
    pub fn validate(&self, cmd: Command, base: &Path) -> Result<(), CliError> {
        let mut issues = Vec::new();
        if self.seeds.is_empty() {
            issues.push("seeds: at least one seed is required".to_string());
        }
        let mut dedup = self.seeds.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != self.seeds.len() {
            issues.push("seeds: duplicate seeds".to_string());
        }

        let d = &self.data;
        // Presence only; existence is checked below for every configured path.
        let mut need = |name: &str, p: &Option<PathBuf>, what: &str| {
            if p.is_none() {
                issues.push(format!("data.{name}: required by {cmd} ({what})"));
            }
        };
        match cmd {
            Command::Train | Command::Probes | Command::Sweep => {
                need("target_features", &d.target_features, "target-model image features");
                need("vl_image_features", &d.vl_image_features, "VL image features");
            }
            Command::Eval => need("target_features", &d.target_features, "target-model image features"),
            Command::Correct => {
                need("target_features", &d.target_features, "target-model image features");
                need("manifest", &d.manifest, "train/test labels");
                need("head", &d.head, "the head to fine-tune");
            }
            Command::Synth => {}
        }
        if cmd != Command::Synth {
            if d.concepts.is_empty() {
                issues.push(format!("data.concepts: {cmd} needs at least one concept spec"));
            }
            for p in &d.concepts {
                check_exists(&mut issues, "concepts", &base.join(p), false);
            }
            for (name, p) in [
                ("target_features", &d.target_features),
                ("vl_image_features", &d.vl_image_features),
                ("manifest", &d.manifest),
                ("similarity", &d.similarity),
                ("pairs", &d.pairs),
            ] {
                if let Some(p) = p {
                    check_exists(&mut issues, name, &base.join(p), true);
                }
            }
            if let Some(h) = &d.head {
                let stem = base.join(h);
                for ext in ["bin", "json"] {
                    let f = PathBuf::from(format!("{}.{ext}", stem.display()));
                    if !f.is_file() {
                        issues.push(format!("data.head: {} does not exist", f.display()));
                    }
                }
            }
        }
        if matches!(cmd, Command::Correct) && d.pairs.is_none() && d.similarity.is_none() {
            issues.push("data.pairs or data.similarity: correct needs concept-class pairs".to_string());
        }
        if cmd == Command::Eval && self.eval.concept_to_class == Some(true) {
            if d.head.is_none() {
                issues.push("data.head: concept-to-class was requested but no head is configured".into());
            }
            if d.pairs.is_none() && d.similarity.is_none() {
                issues.push(
                    "data.similarity: concept-to-class was requested but neither a similarity matrix nor a pair set is configured"
                        .into(),
                );
            }
        }

        let t = &self.train;
        if t.probes == 0 || t.probes % 2 != 0 {
            issues.push(format!("train.probes: must be a positive even number, got {}", t.probes));
        }
        if t.pair_cap == 0 {
            issues.push("train.pair_cap: must be >= 1".into());
        }
        if t.examples == 0 {
            issues.push("train.examples: must be >= 1".into());
        }
        positive(&mut issues, "train.learning_rate", t.learning_rate);
        if t.epochs == 0 {
            issues.push("train.epochs: must be >= 1".into());
        }
        if t.batch == BatchMode::MiniBatch(0) {
            issues.push("train.batch: mini-batch size must be >= 1".into());
        }
        if !(t.guidance.lambda >= 0.0 && t.guidance.lambda.is_finite()) {
            issues.push(format!("train.guidance.lambda: must be >= 0, got {}", t.guidance.lambda));
        }
        let e = &self.eval;
        if !(-1.0..=1.0).contains(&e.epsilon) {
            issues.push(format!("eval.epsilon: must lie in [-1, 1], got {}", e.epsilon));
        }
        if e.recall_k == 0 {
            issues.push("eval.recall_k: must be >= 1".into());
        }
        positive(&mut issues, "correct.learning_rate", self.correct.learning_rate);
        if cmd == Command::Synth {
            if let Err(err) = self.synth.world.validate() {
                issues.push(format!("synth.world: {err}"));
            }
            if self.synth.examples == SampleSize::Count(0) {
                issues.push("synth.examples: must be >= 1".into());
            }
        }
        if cmd == Command::Sweep {
            let s = &self.sweep;
            if s.strategies.is_empty() {
                issues.push("sweep.strategies: at least one strategy is required".into());
            }
            if s.probes.is_empty() {
                issues.push("sweep.probes: at least one probe count is required".into());
            }
            for &p in &s.probes {
                if p == 0 || p % 2 != 0 {
                    issues.push(format!("sweep.probes: {p} is not a positive even number"));
                }
            }
            for &l in &s.lambdas {
                if !(l >= 0.0 && l.is_finite()) {
                    issues.push(format!("sweep.lambdas: {l} is not >= 0"));
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(issues))
        }
    }

    pub fn cavs_dir(&self, base: &Path) -> PathBuf {
        match &self.cavs {
            Some(p) => base.join(p),
            None => base.join(&self.out).join("cavs"),
        }
    }

    pub fn sweep_lambdas(&self) -> Vec<f64> {
        if self.sweep.lambdas.is_empty() {
            vec![self.train.guidance.lambda]
        } else {
            self.sweep.lambdas.clone()
        }
    }

    /// The variant label matching the guidance switches, for reports.
    pub fn variant_label(&self) -> String {
        let g = &self.train.guidance;
        let mut name = String::from(Variant::Ours.name());
        for (on, tag) in [
            (g.gaussian_alignment, "+ga"),
            (g.concept_ensemble, "+ce"),
            (g.deviation_reweighting, "+dsr"),
        ] {
            if on {
                name.push_str(tag);
            }
        }
        name
    }
}

fn check_exists(issues: &mut Vec<String>, name: &str, path: &Path, file: bool) {
    let ok = if file { path.is_file() } else { path.exists() };
    if !ok {
        issues.push(format!("data.{name}: {} does not exist", path.display()));
    }
}

fn positive(issues: &mut Vec<String>, name: &str, x: f64) {
    if !(x > 0.0 && x.is_finite()) {
        issues.push(format!("{name}: must be positive, got {x}"));
    }
}
