use std::path::Path;

use lgcav_core::metrics::{evaluate, EvalContext, MetricReport};
use lgcav_core::synthbench::Summary;
use rayon::prelude::*;
use serde::Serialize;

use super::{load_cavs, seed_dir, summarize, Inputs, ReportMeta};
use crate::config::{Command, RunConfig};
use crate::error::CliResult;
use crate::output::{fmt_opt, fmt_pm, OutputDir, Table};

#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Cross-seed mean and std of each aggregate metric.
#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub concept_accuracy: Option<Summary>,
    pub concept_to_class: Option<Summary>,
    pub tcav_score: Option<Summary>,
    pub recall_at_k: Option<Summary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub summary: MetricSummary,
    pub seeds: Vec<SeedMetrics>,
}

#[derive(Debug, Serialize)]
struct ConceptCsvRow<'a> {
    seed: u64,
    concept: &'a str,
    concept_accuracy: Option<f64>,
    recall_at_k: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PairCsvRow<'a> {
    seed: u64,
    concept: &'a str,
    class: usize,
    cosine: f64,
    acute: bool,
}

pub(super) fn run(cfg: &RunConfig, base: &Path, out: &mut OutputDir) -> CliResult<()> {
    let mut inputs = Inputs::load(cfg, base, false)?;
    if cfg.eval.concept_to_class == Some(false) {
        inputs.head = None;
    } else if inputs.head.is_some() && inputs.pairs.is_none() {
        log::warn!("no pair set or similarity matrix configured; concept-to-class and TCAV omitted");
    }
    let cav_root = cfg.cavs_dir(base);
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            // Thresholds for bias-free CAVs are fitted on the same capped
            // examples training saw.
            let specs = inputs.specs_for_seed(cfg, seed);
            let cavs = load_cavs(&seed_dir(&cav_root, seed), &specs)?;
            let ctx = EvalContext {
                target: &inputs.target,
                head: inputs.head.as_ref(),
                pairs: inputs.pairs.as_ref(),
                recall_k: cfg.eval.recall_k,
            };
            Ok(SeedMetrics {
                seed,
                report: evaluate(&cavs, &specs, &ctx)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let summary = MetricSummary {
        concept_accuracy: summarize(seeds.iter().map(|s| s.report.concept_accuracy)),
        concept_to_class: summarize(seeds.iter().map(|s| s.report.concept_to_class)),
        tcav_score: summarize(seeds.iter().map(|s| s.report.tcav_score)),
        recall_at_k: summarize(seeds.iter().map(|s| s.report.recall_at_k)),
    };
    let report = EvalReport {
        meta: ReportMeta::new(Command::Eval, cfg),
        summary,
        seeds,
    };

    let concept_rows: Vec<ConceptCsvRow> = report
        .seeds
        .iter()
        .flat_map(|s| {
            s.report.per_concept.iter().map(move |c| ConceptCsvRow {
                seed: s.seed,
                concept: &c.concept,
                concept_accuracy: c.concept_accuracy,
                recall_at_k: c.recall_at_k,
            })
        })
        .collect();
    let pair_rows: Vec<PairCsvRow> = report
        .seeds
        .iter()
        .flat_map(|s| {
            s.report.per_pair.iter().map(move |p| PairCsvRow {
                seed: s.seed,
                concept: &p.concept,
                class: p.class,
                cosine: p.cosine,
                acute: p.acute,
            })
        })
        .collect();

    let mut per_concept = Table::new(["concept", "accuracy", format!("recall@{}", cfg.eval.recall_k).as_str()]);
    for (i, c) in report.seeds[0].report.per_concept.iter().enumerate() {
        let acc = summarize(report.seeds.iter().map(|s| s.report.per_concept[i].concept_accuracy));
        let rec = summarize(report.seeds.iter().map(|s| s.report.per_concept[i].recall_at_k));
        let cell = |x: Option<Summary>| x.map_or_else(|| "-".to_string(), |s| fmt_pm(s.mean, s.std));
        per_concept.row([c.concept.clone(), cell(acc), cell(rec)]);
    }
    let mut totals = Table::new(["metric", "mean", "std"]);
    for (name, s) in [
        ("concept accuracy", report.summary.concept_accuracy),
        ("concept-to-class", report.summary.concept_to_class),
        ("tcav score", report.summary.tcav_score),
        ("recall@k", report.summary.recall_at_k),
    ] {
        totals.row([name.to_string(), fmt_opt(s.map(|s| s.mean)), fmt_opt(s.map(|s| s.std))]);
    }
    out.json("eval.json", &report)?;
    out.csv("eval.csv", &concept_rows)?;
    out.csv("eval_pairs.csv", &pair_rows)?;
    out.text(
        "eval.txt",
        &format!("seeds: {}\n\n{}\n{}", report.seeds.len(), totals.render(), per_concept.render()),
    )?;
    Ok(())
}
