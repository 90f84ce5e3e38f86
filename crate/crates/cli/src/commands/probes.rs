use std::path::Path;

use lgcav_core::cavtrain::{concept_text, plan_for_concept, vl_activations};
use rayon::prelude::*;
use serde::Serialize;

use super::{Inputs, ReportMeta};
use crate::config::{Command, RunConfig};
use crate::error::CliResult;
use crate::output::{OutputDir, Table};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub concept: String,
    pub rank: usize,
    pub id: String,
    /// Raw VL image-text cosine.
    pub vl_activation: f64,
    /// Training target after the configured alignment.
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub seed: u64,
    pub rows: Vec<ProbeRow>,
}

/// The probe set, VL activations, targets and weights each concept would
/// train with under the first configured seed.
pub(super) fn run(cfg: &RunConfig, base: &Path, out: &mut OutputDir) -> CliResult<()> {
    let inputs = Inputs::load(cfg, base, true)?;
    let pool = inputs.probe_pool();
    let seed = cfg.seeds[0];
    let vl = inputs.vl.as_ref().expect("loaded with VL features");
    let per_concept = inputs
        .specs_for_seed(cfg, seed)
        .par_iter()
        .map(|spec| {
            let src = inputs.probe_source(cfg, &pool, cfg.train.probes, seed);
            let plan = plan_for_concept(spec, &src, &cfg.train.guidance)?;
            let acts = vl_activations(&concept_text(spec, &cfg.train.guidance)?, vl, &plan.probe)?;
            Ok(plan
                .probe
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| ProbeRow {
                    concept: spec.name.clone(),
                    rank: i,
                    id: id.clone(),
                    vl_activation: acts[i],
                    target: plan.targets[i],
                    weight: plan.weights[i],
                })
                .collect::<Vec<_>>())
        })
        .collect::<CliResult<Vec<_>>>()?;
    let rows: Vec<ProbeRow> = per_concept.into_iter().flatten().collect();

    let mut table = Table::new(["concept", "probes", "vl min", "vl max", "target min", "target max", "weight min", "weight max"]);
    for spec in &inputs.specs {
        let mine: Vec<&ProbeRow> = rows.iter().filter(|r| r.concept == spec.name).collect();
        let range = |f: fn(&ProbeRow) -> f64| {
            let lo = mine.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
            let hi = mine.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
            [format!("{lo:.4}"), format!("{hi:.4}")]
        };
        let [a, b] = range(|r| r.vl_activation);
        let [c, d] = range(|r| r.target);
        let [e, f] = range(|r| r.weight);
        table.row([spec.name.clone(), mine.len().to_string(), a, b, c, d, e, f]);
    }
    let report = ProbeReport {
        meta: ReportMeta::new(Command::Probes, cfg),
        seed,
        rows,
    };
    out.json("probes.json", &report)?;
    out.csv("probes.csv", &report.rows)?;
    out.text("probes.txt", &table.render())?;
    Ok(())
}
