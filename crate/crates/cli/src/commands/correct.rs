use std::collections::BTreeMap;
use std::path::Path;

use lgcav_core::correction::{
    confused_class, confused_prompt, confusion_matrix, fine_tune_head, head_accuracy, AsrPlan,
};
use lgcav_core::synthbench::Summary;
use lgcav_core::{Cav, Error, Split};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::{load_cavs, seed_dir, summarize, Inputs, ReportMeta};
use crate::config::{Command, RunConfig};
use crate::error::CliResult;
use crate::output::{fmt_opt, OutputDir, Table};

#[derive(Debug, Clone, Serialize)]
pub struct Reweighted {
    pub class: usize,
    pub concept: String,
    pub images: usize,
    pub min_weight: f64,
    pub max_weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectRun {
    pub seed: u64,
    pub reweighted: Vec<Reweighted>,
    pub test_before: Option<f64>,
    pub test_after: Option<f64>,
    pub test_uniform: Option<f64>,
    pub train_before: f64,
    pub train_after: f64,
    pub final_loss: Option<f64>,
}

/// Per class: the class it is most often mistaken for, and the prompt an
/// extractor should embed to describe the difference.
#[derive(Debug, Clone, Serialize)]
pub struct ConfusedPrompt {
    pub class: usize,
    pub confused_with: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub test_before: Option<Summary>,
    pub test_after: Option<Summary>,
    pub test_uniform: Option<Summary>,
    pub improved_seeds: usize,
    pub runs: Vec<CorrectRun>,
    pub confused_prompts: Vec<ConfusedPrompt>,
}

/// One CAV per class: the first pair (in pair-set order) naming that class
/// and a concept with a CAV.
fn assignments<'a>(inputs: &Inputs, cavs: &'a [Cav]) -> Vec<(usize, &'a Cav)> {
    let mut by_class: BTreeMap<usize, &Cav> = BTreeMap::new();
    for p in &inputs.pairs.as_ref().expect("validated").pairs {
        let Some(cav) = cavs.iter().find(|c| c.concept == p.concept) else {
            continue;
        };
        match by_class.get(&p.class) {
            None => {
                by_class.insert(p.class, cav);
            }
            Some(kept) if kept.concept != cav.concept => log::warn!(
                "class {} pairs with several concepts; using {:?}, ignoring {:?}",
                p.class,
                kept.concept,
                cav.concept
            ),
            Some(_) => {}
        }
    }
    by_class.into_iter().collect()
}

pub(super) fn run(cfg: &RunConfig, base: &Path, out: &mut OutputDir) -> CliResult<()> {
    let inputs = Inputs::load(cfg, base, false)?;
    let manifest = inputs.manifest.as_ref().expect("validated");
    let head = inputs.head.as_ref().expect("validated");
    let train = manifest.labelled(Split::Train);
    let test = manifest.labelled(Split::Test);
    if train.is_empty() {
        return Err(Error::InvalidData("manifest has no labelled training images".into()).into());
    }
    let cav_root = cfg.cavs_dir(base);
    let c = &cfg.correct;

    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let cavs = load_cavs(&seed_dir(&cav_root, seed), &inputs.specs)?;
            let assigned = assignments(&inputs, &cavs);
            if assigned.is_empty() {
                log::warn!("no concept-class pair has a trained CAV; fine-tuning without reweighting");
            }
            let plan = AsrPlan::build(&assigned, &inputs.target, &train, c.epochs, c.learning_rate, seed)?;
            let tuned = fine_tune_head(head, &inputs.target, &train, &plan)?;
            let uniform = if c.uniform_control && !test.is_empty() {
                let plain = AsrPlan::uniform(c.epochs, c.learning_rate, seed);
                Some(fine_tune_head(head, &inputs.target, &train, &plain)?.head)
            } else {
                None
            };
            let acc = |h| -> CliResult<Option<f64>> {
                Ok(if test.is_empty() {
                    None
                } else {
                    Some(head_accuracy(h, &inputs.target, &test)?)
                })
            };
            let run = CorrectRun {
                seed,
                reweighted: plan
                    .classes
                    .iter()
                    .map(|w| Reweighted {
                        class: w.class,
                        concept: w.concept.clone(),
                        images: w.items.len(),
                        min_weight: w.weights.iter().copied().fold(f64::INFINITY, f64::min),
                        max_weight: w.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    })
                    .collect(),
                test_before: acc(head)?,
                test_after: acc(&tuned.head)?,
                test_uniform: uniform.as_ref().map(&acc).transpose()?.flatten(),
                train_before: head_accuracy(head, &inputs.target, &train)?,
                train_after: head_accuracy(&tuned.head, &inputs.target, &train)?,
                final_loss: tuned.trace.last().copied(),
            };
            Ok((run, tuned.head))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let eval_split = if test.is_empty() { &train } else { &test };
    let confusion = confusion_matrix(head, &inputs.target, eval_split)?;
    let mut prompts = Vec::new();
    for k in 0..head.num_classes() {
        if let Ok(k2) = confused_class(&confusion, k) {
            prompts.push(ConfusedPrompt {
                class: k,
                confused_with: k2,
                prompt: confused_prompt(&manifest.class_names, k, k2)?,
            });
        }
    }

    let root = out.path("heads");
    for (run, tuned) in &results {
        let stem = seed_dir(&root, run.seed).join("head");
        let mut provenance = BTreeMap::new();
        provenance.insert("source".to_string(), json!("asr-fine-tune"));
        provenance.insert("seed".to_string(), json!(run.seed));
        provenance.insert("epochs".to_string(), json!(c.epochs));
        provenance.insert("learning_rate".to_string(), json!(c.learning_rate));
        tuned.save(&stem, provenance)?;
        out.record(stem.with_extension("json"));
    }
    let runs: Vec<CorrectRun> = results.into_iter().map(|(r, _)| r).collect();
    let report = CorrectReport {
        meta: ReportMeta::new(Command::Correct, cfg),
        test_before: summarize(runs.iter().map(|r| r.test_before)),
        test_after: summarize(runs.iter().map(|r| r.test_after)),
        test_uniform: summarize(runs.iter().map(|r| r.test_uniform)),
        improved_seeds: runs
            .iter()
            .filter(|r| matches!((r.test_before, r.test_after), (Some(b), Some(a)) if a > b))
            .count(),
        runs,
        confused_prompts: prompts,
    };

    let mut table = Table::new(["seed", "test before", "test after", "uniform", "train before", "train after"]);
    for r in &report.runs {
        table.row([
            r.seed.to_string(),
            fmt_opt(r.test_before),
            fmt_opt(r.test_after),
            fmt_opt(r.test_uniform),
            format!("{:.4}", r.train_before),
            format!("{:.4}", r.train_after),
        ]);
    }
    out.json("correct.json", &report)?;
    out.text(
        "correct.txt",
        &format!(
            "improved on {}/{} seeds\n\n{}",
            report.improved_seeds,
            report.runs.len(),
            table.render()
        ),
    )?;
    Ok(())
}
