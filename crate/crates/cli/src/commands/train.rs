use std::path::Path;

use lgcav_core::cavtrain::{plan_for_concept, train_cav};
use lgcav_core::numerics::norm;
use lgcav_core::synthbench::Summary;
use lgcav_core::Cav;
use rayon::prelude::*;
use serde::Serialize;

use super::{cav_stem, seed_dir, summarize, train_sgd, Inputs, ReportMeta};
use crate::config::{Command, RunConfig};
use crate::error::CliResult;
use crate::output::{fmt_pm, OutputDir, Table};

#[derive(Debug, Clone, Serialize)]
pub struct TrainRun {
    pub seed: u64,
    pub final_loss: f64,
    pub norm: f64,
    pub bias: Option<f64>,
    pub rejitters: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Probe images used; 0 without guidance.
    pub probes: usize,
    /// Whether probe weights came from deviation reweighting.
    pub reweighted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptTraining {
    pub concept: String,
    pub runs: Vec<TrainRun>,
    pub final_loss: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub mode: String,
    pub variant: String,
    pub concepts: Vec<ConceptTraining>,
}

/// Trains one CAV per (seed, concept).
pub(crate) fn train_all(cfg: &RunConfig, inputs: &Inputs) -> CliResult<Vec<(u64, Vec<(Cav, TrainRun)>)>> {
    let pool = if cfg.train.mode.uses_guidance() {
        inputs.probe_pool()
    } else {
        Vec::new()
    };
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let specs = inputs.specs_for_seed(cfg, seed);
            let cavs = specs
                .par_iter()
                .map(|spec| {
                    let plan = if cfg.train.mode.uses_guidance() {
                        let src = inputs.probe_source(cfg, &pool, cfg.train.probes, seed);
                        Some(plan_for_concept(spec, &src, &cfg.train.guidance)?)
                    } else {
                        None
                    };
                    let cav = train_cav(cfg.train.mode, spec, &inputs.target, plan.as_ref(), &train_sgd(cfg, seed))?;
                    let run = TrainRun {
                        seed,
                        final_loss: cav.trace.last().copied().unwrap_or(f64::NAN),
                        norm: norm(&cav.vector),
                        bias: cav.bias,
                        rejitters: cav.rejitters,
                        positives: spec.positives.as_ref().map_or(0, Vec::len),
                        negatives: spec.negatives.as_ref().map_or(0, Vec::len),
                        probes: plan.as_ref().map_or(0, |p| p.probe.len()),
                        reweighted: plan.as_ref().is_some_and(|p| p.weights.iter().any(|&w| w != 1.0)),
                    };
                    Ok((cav, run))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok((seed, cavs))
        })
        .collect()
}

pub(super) fn run(cfg: &RunConfig, base: &Path, out: &mut OutputDir) -> CliResult<()> {
    let inputs = Inputs::load(cfg, base, cfg.train.mode.uses_guidance())?;
    let trained = train_all(cfg, &inputs)?;

    let cav_root = cfg.cavs_dir(base);
    for (seed, cavs) in &trained {
        let dir = seed_dir(&cav_root, *seed);
        for (cav, _) in cavs {
            let stem = cav_stem(&dir, &cav.concept);
            cav.save(&stem)?;
            out.record(stem.with_extension("json"));
        }
    }

    let concepts: Vec<ConceptTraining> = inputs
        .specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let runs: Vec<TrainRun> = trained.iter().map(|(_, cavs)| cavs[i].1.clone()).collect();
            let final_loss = summarize(runs.iter().map(|r| Some(r.final_loss))).expect("at least one seed");
            ConceptTraining {
                concept: spec.name.clone(),
                runs,
                final_loss,
            }
        })
        .collect();
    let report = TrainReport {
        meta: ReportMeta::new(Command::Train, cfg),
        mode: cfg.train.mode.to_string(),
        variant: if cfg.train.mode.uses_guidance() {
            cfg.variant_label()
        } else {
            "original".to_string()
        },
        concepts,
    };

    let mut table = Table::new(["concept", "seeds", "final loss", "norm", "probes", "rejitters"]);
    for c in &report.concepts {
        let n = Summary::of(&c.runs.iter().map(|r| r.norm).collect::<Vec<_>>());
        table.row([
            c.concept.clone(),
            c.runs.len().to_string(),
            fmt_pm(c.final_loss.mean, c.final_loss.std),
            format!("{:.4}", n.mean),
            c.runs[0].probes.to_string(),
            c.runs.iter().map(|r| r.rejitters).sum::<usize>().to_string(),
        ]);
    }
    out.json("train.json", &report)?;
    out.text("train.txt", &format!("mode: {} ({})\n\n{}", report.mode, report.variant, table.render()))?;
    Ok(())
}
