use std::path::Path;

use lgcav_core::cavtrain::{plan_for_concept, train_cav, GuidanceOptions};
use lgcav_core::concepts::ProbeStrategy;
use lgcav_core::metrics::{evaluate, EvalContext};
use lgcav_core::synthbench::{dedup_grid, Summary};
use rayon::prelude::*;
use serde::Serialize;

use super::{summarize, train_sgd, Inputs, ReportMeta};
use crate::config::{Command, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{fmt_opt, OutputDir, Table};

#[derive(Debug, Clone, Copy, PartialEq)]
struct GridPoint {
    strategy: ProbeStrategy,
    probes: usize,
    lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: ProbeStrategy,
    pub probes: usize,
    pub lambda: f64,
    pub seeds: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub recall_mean: Option<f64>,
    pub recall_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub mode: String,
    pub rows: Vec<SweepRow>,
}

/// Mean concept accuracy and recall over all concepts at one grid point.
fn evaluate_point(cfg: &RunConfig, inputs: &Inputs, pool: &[String], p: GridPoint, seed: u64) -> CliResult<(Option<f64>, Option<f64>)> {
    let specs = inputs.specs_for_seed(cfg, seed);
    let opts = GuidanceOptions {
        lambda: p.lambda,
        ..cfg.train.guidance
    };
    let mut run_cfg = cfg.clone();
    run_cfg.train.probe_strategy = p.strategy;
    let cavs = specs
        .par_iter()
        .map(|spec| {
            let src = inputs.probe_source(&run_cfg, pool, p.probes, seed);
            let plan = plan_for_concept(spec, &src, &opts)?;
            Ok(train_cav(cfg.train.mode, spec, &inputs.target, Some(&plan), &train_sgd(cfg, seed))?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let ctx = EvalContext {
        target: &inputs.target,
        head: None,
        pairs: None,
        recall_k: cfg.eval.recall_k,
    };
    let report = evaluate(&cavs, &specs, &ctx)?;
    Ok((report.concept_accuracy, report.recall_at_k))
}

pub(super) fn run(cfg: &RunConfig, base: &Path, out: &mut OutputDir) -> CliResult<()> {
    if !cfg.train.mode.uses_guidance() {
        return Err(CliError::Config(vec![format!(
            "train.mode: sweep varies probe settings, which {} mode ignores",
            cfg.train.mode
        )]));
    }
    let inputs = Inputs::load(cfg, base, true)?;
    let pool = inputs.probe_pool();
    let grid: Vec<GridPoint> = dedup_grid(&cfg.sweep.strategies)
        .into_iter()
        .flat_map(|strategy| {
            dedup_grid(&cfg.sweep.probes).into_iter().flat_map(move |probes| {
                dedup_grid(&cfg.sweep_lambdas())
                    .into_iter()
                    .map(move |lambda| GridPoint { strategy, probes, lambda })
            })
        })
        .collect();
    let rows = grid
        .par_iter()
        .map(|&p| {
            let per_seed = cfg
                .seeds
                .par_iter()
                .map(|&seed| evaluate_point(cfg, &inputs, &pool, p, seed))
                .collect::<CliResult<Vec<_>>>()?;
            let acc = summarize(per_seed.iter().map(|r| r.0));
            let rec = summarize(per_seed.iter().map(|r| r.1));
            let split = |s: Option<Summary>| (s.map(|s| s.mean), s.map(|s| s.std));
            let ((accuracy_mean, accuracy_std), (recall_mean, recall_std)) = (split(acc), split(rec));
            Ok(SweepRow {
                strategy: p.strategy,
                probes: p.probes,
                lambda: p.lambda,
                seeds: cfg.seeds.len(),
                accuracy_mean,
                accuracy_std,
                recall_mean,
                recall_std,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let report = SweepReport {
        meta: ReportMeta::new(Command::Sweep, cfg),
        mode: cfg.train.mode.to_string(),
        rows,
    };
    let mut table = Table::new(["strategy", "probes", "lambda", "accuracy", "± std", "recall", "± std"]);
    for r in &report.rows {
        table.row([
            format!("{:?}", r.strategy).to_lowercase(),
            r.probes.to_string(),
            format!("{}", r.lambda),
            fmt_opt(r.accuracy_mean),
            fmt_opt(r.accuracy_std),
            fmt_opt(r.recall_mean),
            fmt_opt(r.recall_std),
        ]);
    }
    out.json("sweep.json", &report)?;
    out.csv("sweep.csv", &report.rows)?;
    out.text("sweep.txt", &table.render())?;
    Ok(())
}
