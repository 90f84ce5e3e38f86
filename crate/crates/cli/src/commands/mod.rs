//! One module per subcommand. Each computes everything in memory (in
//! parallel where it pays) and hands the results to the caller's
//! [`OutputDir`], which does all the writing.

mod correct;
mod eval;
mod probes;
mod sweep;
mod synth;
mod train;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use lgcav_core::cavtrain::ProbeSource;
use lgcav_core::concepts::{build_pair_set, limit_examples};
use lgcav_core::embedstore::{join_by_id, load_matrix};
use lgcav_core::synthbench::Summary;
use lgcav_core::{
    Cav, ConceptSpec, DatasetManifest, EmbeddingMatrix, Error, LinearHead, PairSet, SgdConfig, Split,
};
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;

pub use correct::CorrectReport;
pub use eval::EvalReport;
pub use probes::ProbeReport;
pub use sweep::{SweepReport, SweepRow};
pub use synth::SynthReport;
pub use train::TrainReport;

/// Runs `cmd` with `cfg` (paths resolved against `base`), writing into `out`.
pub fn run(cmd: Command, cfg: &RunConfig, base: &Path, out: &mut OutputDir) -> CliResult<()> {
    cfg.validate(cmd, base)?;
    match cmd {
        Command::Train => train::run(cfg, base, out),
        Command::Eval => eval::run(cfg, base, out),
        Command::Correct => correct::run(cfg, base, out),
        Command::Synth => synth::run(cfg, out),
        Command::Sweep => sweep::run(cfg, base, out),
        Command::Probes => probes::run(cfg, base, out),
    }
}

/// Everything a command may read, loaded once.
pub(crate) struct Inputs {
    pub target: EmbeddingMatrix,
    pub vl: Option<EmbeddingMatrix>,
    pub manifest: Option<DatasetManifest>,
    pub specs: Vec<ConceptSpec>,
    pub head: Option<LinearHead>,
    pub pairs: Option<PairSet>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig, base: &Path, need_vl: bool) -> CliResult<Self> {
        let d = &cfg.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| base.join(p));
        let target = load_matrix(&path(&d.target_features).expect("validated"))?;
        let vl = match path(&d.vl_image_features).filter(|_| need_vl) {
            Some(p) => Some(load_matrix(&p)?),
            None => None,
        };
        let manifest = path(&d.manifest).map(|p| DatasetManifest::load(&p)).transpose()?;
        let specs = load_specs(&d.concepts, base)?;
        for spec in &specs {
            if let Some(vl) = &vl {
                if spec.prompts.cols() != vl.cols() {
                    return Err(Error::Shape(format!(
                        "concept {:?} prompts have {} dims, VL image features have {}",
                        spec.name,
                        spec.prompts.cols(),
                        vl.cols()
                    ))
                    .into());
                }
            }
        }
        let head = path(&d.head).map(|p| LinearHead::load(&p)).transpose()?;
        if let Some(h) = &head {
            if h.dim() != target.cols() {
                return Err(Error::Shape(format!(
                    "head has {} input dims, target features have {}",
                    h.dim(),
                    target.cols()
                ))
                .into());
            }
        }
        let pairs = match (path(&d.pairs), path(&d.similarity)) {
            (Some(p), _) => Some(PairSet::load(&p)?),
            (None, Some(s)) => Some(build_pair_set(&load_matrix(&s)?, cfg.eval.epsilon)),
            (None, None) => None,
        };
        if let (Some(pairs), Some(head)) = (&pairs, &head) {
            let names: Vec<&str> = pairs.pairs.iter().map(|p| p.concept.as_str()).collect();
            pairs.validate(head.num_classes(), &names)?;
        }
        Ok(Self {
            target,
            vl,
            manifest,
            specs,
            head,
            pairs,
        })
    }

    /// Probe pool: the manifest's probe-pool split, or every image present
    /// in both feature matrices.
    pub fn probe_pool(&self) -> Vec<String> {
        if let Some(m) = &self.manifest {
            let pool = m.ids_in(Split::ProbePool);
            if !pool.is_empty() {
                return pool;
            }
        }
        let vl = self.vl.as_ref().expect("probe pool needs VL features");
        join_by_id(&self.target, vl)
            .into_iter()
            .map(|(i, _)| self.target.ids()[i].clone())
            .collect()
    }

    pub fn probe_source<'a>(&'a self, cfg: &RunConfig, pool: &'a [String], probes: usize, seed: u64) -> ProbeSource<'a> {
        ProbeSource {
            target: &self.target,
            vl_img: self.vl.as_ref().expect("probe source needs VL features"),
            pool,
            count: probes,
            strategy: cfg.train.probe_strategy,
            pair_cap: cfg.train.pair_cap,
            seed,
        }
    }

    /// Concept specs with training examples capped for `seed`.
    pub fn specs_for_seed(&self, cfg: &RunConfig, seed: u64) -> Vec<ConceptSpec> {
        self.specs
            .iter()
            .map(|s| limit_examples(s, cfg.train.examples, seed))
            .collect()
    }
}

/// Spec files in config order; directories contribute their `*.json` files
/// in name order. Concept names must be unique.
fn load_specs(entries: &[PathBuf], base: &Path) -> CliResult<Vec<ConceptSpec>> {
    let mut files = Vec::new();
    for entry in entries {
        let p = base.join(entry);
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(&p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
                    // Skip id sidecars of prompt matrices stored alongside.
                    name.ends_with(".json") && !name.ends_with(".ids.json")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p);
        }
    }
    let mut seen = HashSet::new();
    let mut specs = Vec::with_capacity(files.len());
    for f in files {
        let spec = ConceptSpec::load(&f)?;
        if !seen.insert(spec.name.clone()) {
            return Err(Error::DuplicateId(spec.name).into());
        }
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(CliError::Config(vec!["data.concepts: no concept spec files found".into()]));
    }
    Ok(specs)
}

pub(crate) fn train_sgd(cfg: &RunConfig, seed: u64) -> SgdConfig {
    SgdConfig {
        learning_rate: cfg.train.learning_rate,
        epochs: cfg.train.epochs,
        batch: cfg.train.batch,
        seed,
    }
}

pub(crate) fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// `Cav::save` swaps the stem's extension, so a fixed dummy extension keeps
/// concept names containing dots intact.
pub(crate) fn cav_stem(dir: &Path, concept: &str) -> PathBuf {
    dir.join(format!("{concept}.cav"))
}

pub(crate) fn load_cavs(dir: &Path, specs: &[ConceptSpec]) -> CliResult<Vec<Cav>> {
    specs
        .iter()
        .map(|s| {
            let cav = Cav::load(&cav_stem(dir, &s.name).with_extension("json"))?;
            if cav.concept != s.name {
                return Err(Error::InvalidData(format!(
                    "CAV file for {:?} names concept {:?}",
                    s.name, cav.concept
                ))
                .into());
            }
            Ok(cav)
        })
        .collect()
}

/// Mean and population std over the seeds that produced a value.
pub(crate) fn summarize(xs: impl IntoIterator<Item = Option<f64>>) -> Option<Summary> {
    let vals: Vec<f64> = xs.into_iter().flatten().collect();
    (!vals.is_empty()).then(|| Summary::of(&vals))
}

/// Common report header.
#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
}

impl ReportMeta {
    pub fn new(cmd: Command, cfg: &RunConfig) -> Self {
        Self {
            command: cmd.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
        }
    }
}
