//! Concept ensembling, probe-set construction and concept-class pair sets.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedstore::{ConceptClassPair, ConceptSpec, EmbeddingMatrix, PairSet, PairSource};
use crate::error::{Error, Result};
use crate::numerics::{self, cosine};

/// Prompt templates used to augment a concept description; `{}` stands for
/// the concept name. The extractor side embeds one prompt per template.
pub const TEMPLATES_JSON: &str = include_str!("../data/templates.json");

#[derive(Deserialize)]
struct TemplateFile {
    placeholder: String,
    templates: Vec<String>,
}

pub fn prompt_templates() -> Vec<String> {
    let file: TemplateFile =
        serde_json::from_str(TEMPLATES_JSON).expect("bundled templates.json is valid");
    file.templates
}

/// Every template filled with `concept`, in template order.
pub fn augmented_prompts(concept: &str) -> Vec<String> {
    let file: TemplateFile =
        serde_json::from_str(TEMPLATES_JSON).expect("bundled templates.json is valid");
    file.templates
        .iter()
        .map(|t| t.replace(&file.placeholder, concept))
        .collect()
}

/// Mean of the prompt embeddings.
///
/// The result is not renormalized: every consumer compares it by cosine,
/// which ignores scale.
pub fn concept_ensemble(prompts: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if prompts.rows() == 0 {
        return Err(Error::InvalidArgument(
            "concept ensemble needs at least one prompt".into(),
        ));
    }
    let mut mean = vec![0.0; prompts.cols()];
    for row in prompts.iter_rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = prompts.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// The probe images R, aligned into both feature spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub ids: Vec<String>,
    pub target_rows: Vec<usize>,
    pub vl_rows: Vec<usize>,
}

impl ProbeSet {
    pub fn build(ids: Vec<String>, target: &EmbeddingMatrix, vl: &EmbeddingMatrix) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a probe set needs at least 2 images, got {}",
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        let target_rows = target.rows_for(&ids).map_err(|e| context(e, "target features"))?;
        let vl_rows = vl.rows_for(&ids).map_err(|e| context(e, "VL image features"))?;
        Ok(Self {
            ids,
            target_rows,
            vl_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn context(err: Error, what: &str) -> Error {
    match err {
        Error::MissingId { id, .. } => Error::missing(id, what),
        other => other,
    }
}

/// How probe images are drawn from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeStrategy {
    /// Most and least activated by the concept text ([`select_probes`]).
    Activation,
    /// Uniform sample ([`random_probes`]).
    Random,
}

/// Cosine of `text` against each pool image's VL features, in pool order.
pub fn pool_activations<S: AsRef<str>>(
    vl_img: &EmbeddingMatrix,
    text: &[f64],
    pool: &[S],
) -> Result<Vec<f64>> {
    pool.iter()
        .map(|id| cosine(text, vl_img.row_by_id(id.as_ref())?))
        .collect()
}

/// The `m` most and `m` least VL-activated pool images.
///
/// Pool images are ranked by activation (descending, ties by ascending id);
/// the first `m` form the top group, and the bottom group is the `m`
/// lowest-activated of the rest under the same tie rule. The result lists
/// the top group in rank order, then the bottom group from the lowest up.
pub fn select_probes<S: AsRef<str>>(
    vl_img: &EmbeddingMatrix,
    text: &[f64],
    pool: &[S],
    m: usize,
) -> Result<Vec<String>> {
    check_pool(pool.len(), m)?;
    let acts = pool_activations(vl_img, text, pool)?;
    let mut ranked: Vec<(f64, &str)> = acts
        .iter()
        .zip(pool)
        .map(|(&a, id)| (a, id.as_ref()))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let (top, rest) = ranked.split_at(m);
    let mut rest = rest.to_vec();
    rest.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(b.1),
        ord => ord,
    });
    Ok(top
        .iter()
        .chain(rest.iter().take(m))
        .map(|(_, id)| id.to_string())
        .collect())
}

/// Uniform sample of `2m` pool ids without replacement.
pub fn random_probes<S: AsRef<str>>(pool: &[S], m: usize, seed: u64) -> Result<Vec<String>> {
    check_pool(pool.len(), m)?;
    let mut ids: Vec<String> = pool.iter().map(|s| s.as_ref().to_string()).collect();
    let mut rng = numerics::rng(seed, numerics::streams::PROBES);
    ids.shuffle(&mut rng);
    ids.truncate(2 * m);
    Ok(ids)
}

/// Caps a concept's training positives and negatives at `n` each.
///
/// Longer lists are subsampled without replacement (seeded, original order
/// kept); shorter ones are left alone. Test lists are untouched.
pub fn limit_examples(spec: &ConceptSpec, n: usize, seed: u64) -> ConceptSpec {
    let mut rng = numerics::rng(seed, numerics::streams::EXAMPLES);
    let mut cap = |ids: &Option<Vec<String>>| {
        ids.as_ref().map(|ids| {
            if ids.len() <= n {
                return ids.clone();
            }
            let mut keep = rand::seq::index::sample(&mut rng, ids.len(), n).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| ids[i].clone()).collect()
        })
    };
    let positives = cap(&spec.positives);
    let negatives = cap(&spec.negatives);
    ConceptSpec {
        positives,
        negatives,
        ..spec.clone()
    }
}

fn check_pool(pool: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("probe count per side must be >= 1".into()));
    }
    if 2 * m > pool {
        return Err(Error::InvalidArgument(format!(
            "probe pool of {pool} images cannot supply {m} top and {m} bottom probes"
        )));
    }
    Ok(())
}

/// All (concept, class) pairs whose similarity strictly exceeds `eps`.
///
/// `sim` is concepts x classes with concept names as row ids.
pub fn build_pair_set(sim: &EmbeddingMatrix, eps: f64) -> PairSet {
    let pairs = sim
        .ids()
        .iter()
        .enumerate()
        .flat_map(|(c, name)| {
            sim.row(c)
                .iter()
                .enumerate()
                .filter(|(_, &s)| s > eps)
                .map(move |(k, _)| ConceptClassPair {
                    concept: name.clone(),
                    class: k,
                })
        })
        .collect();
    PairSet {
        source: PairSource::Threshold,
        pairs,
    }
}
