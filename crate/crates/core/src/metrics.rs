//! CAV quality metrics: concept accuracy, concept-to-class alignment, TCAV
//! score and recall@k.
//!
//! Every metric depends on the CAV direction only, so scaling `v` by a
//! positive factor (and the bias with it) leaves them unchanged.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cavtrain::Cav;
use crate::embedstore::{ConceptSpec, EmbeddingMatrix, LinearHead, PairSet};
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot};

/// Default cut-off for [`recall_at_k`].
pub const DEFAULT_RECALL_K: usize = 100;

/// Rows of `m` for `ids`, in order.
pub fn feature_rows<'a, S: AsRef<str>>(m: &'a EmbeddingMatrix, ids: &[S]) -> Result<Vec<&'a [f64]>> {
    ids.iter().map(|id| m.row_by_id(id.as_ref())).collect()
}

/// How a CAV turns its score `v . f` into a yes/no concept decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Decision {
    /// Positive iff `v . f + b > 0`.
    Bias(f64),
    /// Positive iff `v . f > t`, with `t` fit on training examples.
    FittedThreshold(f64),
}

impl Decision {
    pub fn is_positive(&self, score: f64) -> bool {
        match *self {
            Decision::Bias(b) => score + b > 0.0,
            Decision::FittedThreshold(t) => score > t,
        }
    }
}

/// Threshold on `v . f` maximizing balanced accuracy on the given examples.
///
/// Candidates are -inf, +inf and the midpoints between consecutive distinct
/// scores; the lowest best candidate wins.
pub fn fit_threshold(v: &[f64], pos: &[&[f64]], neg: &[&[f64]]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(
            "threshold fitting needs at least one positive and one negative".into(),
        ));
    }
    let sp: Vec<f64> = pos.iter().map(|f| dot(v, f)).collect();
    let sn: Vec<f64> = neg.iter().map(|f| dot(v, f)).collect();
    let mut all: Vec<f64> = sp.iter().chain(&sn).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(all.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(f64::INFINITY);

    let balanced = |t: f64| {
        let tp = sp.iter().filter(|&&s| s > t).count() as f64 / sp.len() as f64;
        let tn = sn.iter().filter(|&&s| s <= t).count() as f64 / sn.len() as f64;
        (tp + tn) / 2.0
    };
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for t in candidates {
        let acc = balanced(t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best.0)
}

/// The decision rule for `cav`: its own bias if it has one, otherwise a
/// threshold fit on `fit` (training positives, negatives).
pub fn decision_for(cav: &Cav, fit: Option<(&[&[f64]], &[&[f64]])>) -> Result<Decision> {
    match (cav.bias, fit) {
        (Some(b), _) => Ok(Decision::Bias(b)),
        (None, Some((pos, neg))) => Ok(Decision::FittedThreshold(fit_threshold(&cav.vector, pos, neg)?)),
        (None, None) => Err(Error::InvalidArgument(format!(
            "CAV {:?} has no bias; accuracy needs training examples to fit a threshold",
            cav.concept
        ))),
    }
}

/// Fraction of test items classified correctly by `v . f` under `decision`.
pub fn concept_accuracy(v: &[f64], decision: Decision, pos_test: &[&[f64]], neg_test: &[&[f64]]) -> Result<f64> {
    if pos_test.is_empty() || neg_test.is_empty() {
        return Err(Error::InvalidArgument(
            "concept accuracy needs nonempty positive and negative test sets".into(),
        ));
    }
    let correct = pos_test.iter().filter(|f| decision.is_positive(dot(v, f))).count()
        + neg_test.iter().filter(|f| !decision.is_positive(dot(v, f))).count();
    Ok(correct as f64 / (pos_test.len() + neg_test.len()) as f64)
}

/// Cosine between the CAV and class `k`'s weight row (the gradient of a
/// linear head's logit `k`).
pub fn concept_to_class(v: &[f64], head: &LinearHead, k: usize) -> Result<f64> {
    if k >= head.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class index {k} out of range for {} classes",
            head.num_classes()
        )));
    }
    cosine(v, head.class_row(k)).map_err(|e| match e {
        Error::ZeroNorm(_) => Error::ZeroNorm(format!("class {k} weight row or CAV has zero norm")),
        other => other,
    })
}

fn find_cav<'a>(cavs: &'a [Cav], concept: &str) -> Result<&'a Cav> {
    cavs.iter()
        .find(|c| c.concept == concept)
        .ok_or_else(|| Error::missing(concept, "trained CAVs"))
}

/// Fraction of pairs whose CAV has an acute angle with the class weight row.
pub fn tcav_score(cavs: &[Cav], head: &LinearHead, pairs: &PairSet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("TCAV score needs at least one pair".into()));
    }
    let mut acute = 0usize;
    for p in &pairs.pairs {
        if p.class >= head.num_classes() {
            return Err(Error::InvalidArgument(format!("pair class {} out of range", p.class)));
        }
        if dot(&find_cav(cavs, &p.concept)?.vector, head.class_row(p.class)) > 0.0 {
            acute += 1;
        }
    }
    Ok(acute as f64 / pairs.pairs.len() as f64)
}

/// Share of `truth` among the `k` items most activated by `v`
/// (cosine, descending; ties by ascending id).
pub fn recall_at_k<S: AsRef<str>>(v: &[f64], feats: &EmbeddingMatrix, truth: &[S], k: usize) -> Result<f64> {
    let truth: HashSet<&str> = truth.iter().map(AsRef::as_ref).collect();
    if truth.is_empty() {
        return Err(Error::InvalidArgument("recall needs a nonempty ground-truth set".into()));
    }
    if k > feats.rows() {
        return Err(Error::InvalidArgument(format!(
            "recall@{k} requested over {} items",
            feats.rows()
        )));
    }
    if let Some(id) = truth.iter().find(|id| feats.index_of(id).is_none()) {
        return Err(Error::missing(*id, "recall features"));
    }
    let mut ranked: Vec<(f64, &str)> = feats
        .iter_rows()
        .zip(feats.ids())
        .map(|(f, id)| Ok((cosine(v, f)?, id.as_str())))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let hits = ranked[..k].iter().filter(|(_, id)| truth.contains(id)).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub concept: String,
    pub concept_accuracy: Option<f64>,
    /// Decision rule behind `concept_accuracy`.
    pub decision: Option<Decision>,
    pub recall_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub concept: String,
    pub class: usize,
    pub cosine: f64,
    pub acute: bool,
}

/// Aggregates are unweighted means of the per-concept / per-pair entries;
/// a metric is `None` when its inputs were not supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub concept_accuracy: Option<f64>,
    pub concept_to_class: Option<f64>,
    pub tcav_score: Option<f64>,
    pub recall_at_k: Option<f64>,
    pub recall_k: usize,
    pub per_concept: Vec<ConceptMetrics>,
    pub per_pair: Vec<PairMetrics>,
}

/// Inputs shared by every concept in an evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub target: &'a EmbeddingMatrix,
    pub head: Option<&'a LinearHead>,
    pub pairs: Option<&'a PairSet>,
    pub recall_k: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn concept_metrics(cav: &Cav, spec: &ConceptSpec, ctx: &EvalContext) -> Result<ConceptMetrics> {
    let target = ctx.target;
    let (mut accuracy, mut decision) = (None, None);
    if let (Some(tp), Some(tn)) = (&spec.test_positives, &spec.test_negatives) {
        let fit = match (&spec.positives, &spec.negatives) {
            (Some(p), Some(n)) => Some((feature_rows(target, p)?, feature_rows(target, n)?)),
            _ => None,
        };
        let d = decision_for(cav, fit.as_ref().map(|(p, n)| (p.as_slice(), n.as_slice())))?;
        let (tp, tn) = (feature_rows(target, tp)?, feature_rows(target, tn)?);
        accuracy = Some(concept_accuracy(&cav.vector, d, &tp, &tn)?);
        decision = Some(d);
    }
    let recall = spec
        .recall_truth
        .as_ref()
        .map(|truth| recall_at_k(&cav.vector, target, truth, ctx.recall_k))
        .transpose()?;
    Ok(ConceptMetrics {
        concept: cav.concept.clone(),
        concept_accuracy: accuracy,
        decision,
        recall_at_k: recall,
    })
}

/// All metrics for `cavs`, each matched to the spec of the same name.
///
/// Pairs naming concepts without a CAV are skipped with a warning; an empty
/// (or absent) pair set omits concept-to-class and TCAV.
pub fn evaluate(cavs: &[Cav], specs: &[ConceptSpec], ctx: &EvalContext) -> Result<MetricReport> {
    let per_concept = cavs
        .par_iter()
        .map(|cav| {
            let spec = specs
                .iter()
                .find(|s| s.name == cav.concept)
                .ok_or_else(|| Error::missing(&cav.concept, "concept specs"))?;
            concept_metrics(cav, spec, ctx)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_pair = Vec::new();
    match (ctx.head, ctx.pairs) {
        (Some(head), Some(pairs)) if !pairs.is_empty() => {
            for p in &pairs.pairs {
                let Ok(cav) = find_cav(cavs, &p.concept) else {
                    log::warn!("pair ({}, {}) has no trained CAV; skipped", p.concept, p.class);
                    continue;
                };
                let c = concept_to_class(&cav.vector, head, p.class)?;
                per_pair.push(PairMetrics {
                    concept: p.concept.clone(),
                    class: p.class,
                    cosine: c,
                    acute: c > 0.0,
                });
            }
        }
        (Some(_), _) => log::warn!("pair set is empty; concept-to-class and TCAV omitted"),
        _ => {}
    }

    Ok(MetricReport {
        concept_accuracy: mean(per_concept.iter().filter_map(|c| c.concept_accuracy)),
        concept_to_class: mean(per_pair.iter().map(|p| p.cosine)),
        tcav_score: mean(per_pair.iter().map(|p| if p.acute { 1.0 } else { 0.0 })),
        recall_at_k: mean(per_concept.iter().filter_map(|c| c.recall_at_k)),
        recall_k: ctx.recall_k,
        per_concept,
        per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavtrain::CavMode;
    use crate::embedstore::{ConceptClassPair, PairSource};
    use crate::numerics;
    use rand::Rng;

    fn cav(v: Vec<f64>, bias: Option<f64>) -> Cav {
        Cav {
            concept: "c".into(),
            mode: if bias.is_some() { CavMode::Original } else { CavMode::Lg },
            vector: v,
            bias,
            lambda: 0.0,
            seed: 0,
            trace: vec![],
            rejitters: 0,
        }
    }

    fn head(rows: Vec<Vec<f64>>) -> LinearHead {
        let k = rows.len();
        let ids = (0..k).map(|i| format!("class{i}")).collect();
        LinearHead::new(EmbeddingMatrix::from_rows(ids, &rows).unwrap(), vec![0.0; k]).unwrap()
    }

    fn pairs(list: &[(&str, usize)]) -> PairSet {
        PairSet {
            source: PairSource::Explicit,
            pairs: list
                .iter()
                .map(|&(c, k)| ConceptClassPair {
                    concept: c.into(),
                    class: k,
                })
                .collect(),
        }
    }

    #[test]
    fn accuracy_examples() {
        let pos: Vec<&[f64]> = vec![&[2.0, 0.0], &[1.0, 5.0]];
        let neg: Vec<&[f64]> = vec![&[-1.0, 0.0], &[-3.0, 1.0]];
        let v = [1.0, 0.0];
        assert_eq!(concept_accuracy(&v, Decision::Bias(0.0), &pos, &neg).unwrap(), 1.0);
        assert_eq!(concept_accuracy(&v, Decision::Bias(-1.5), &pos, &neg).unwrap(), 0.75);
        assert!(concept_accuracy(&v, Decision::Bias(0.0), &pos, &[]).is_err());

        // Labels assigned by a random v are reproduced by that v.
        let mut r = numerics::rng(1, 0);
        let v: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let (p, n): (Vec<&[f64]>, Vec<&[f64]>) = rows
            .iter()
            .map(Vec::as_slice)
            .partition(|f| dot(&v, f) > 0.0);
        assert_eq!(concept_accuracy(&v, Decision::Bias(0.0), &p, &n).unwrap(), 1.0);
    }

    #[test]
    fn threshold_fitting() {
        let pos: Vec<&[f64]> = vec![&[3.0], &[4.0]];
        let neg: Vec<&[f64]> = vec![&[1.0], &[2.0]];
        assert_eq!(fit_threshold(&[1.0], &pos, &neg).unwrap(), 2.5);
        // Fully inverted data: flipping nothing beats every split.
        let t = fit_threshold(&[-1.0], &pos, &neg).unwrap();
        assert_eq!(t, f64::NEG_INFINITY);
        let lg = cav(vec![1.0], None);
        assert!(decision_for(&lg, None).is_err());
        assert_eq!(
            decision_for(&lg, Some((&pos, &neg))).unwrap(),
            Decision::FittedThreshold(2.5)
        );
    }

    #[test]
    fn concept_to_class_examples() {
        let h = head(vec![vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert!((concept_to_class(&[1.0, 2.0], &h, 0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(concept_to_class(&[-2.0, 1.0], &h, 0).unwrap(), 0.0);
        assert!(matches!(concept_to_class(&[1.0, 0.0], &h, 1), Err(Error::ZeroNorm(_))));
        assert!(concept_to_class(&[1.0, 0.0], &h, 2).is_err());
    }

    #[test]
    fn tcav_examples() {
        let h = head(vec![vec![1.0, 2.0]]);
        let p = pairs(&[("c", 0)]);
        assert_eq!(tcav_score(&[cav(vec![1.0, 2.0], None)], &h, &p).unwrap(), 1.0);
        assert_eq!(tcav_score(&[cav(vec![-1.0, -2.0], None)], &h, &p).unwrap(), 0.0);
        assert!(tcav_score(&[cav(vec![1.0, 2.0], None)], &h, &pairs(&[])).is_err());
        assert!(tcav_score(&[cav(vec![1.0, 2.0], None)], &h, &pairs(&[("d", 0)])).is_err());
    }

    fn line(n: usize) -> EmbeddingMatrix {
        // Item i has cosine decreasing in i against [1, 0].
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::PI;
                vec![a.cos(), a.sin()]
            })
            .collect();
        EmbeddingMatrix::from_rows((0..n).map(|i| format!("i{i:04}")).collect(), &rows).unwrap()
    }

    #[test]
    fn recall_examples() {
        let m = line(300);
        let ids = m.ids();
        let v = [1.0, 0.0];
        assert_eq!(recall_at_k(&v, &m, &ids[..50], 100).unwrap(), 1.0);
        assert_eq!(recall_at_k(&v, &m, &ids[200..250], 100).unwrap(), 0.0);
        // 40 truths inside the top 100, 10 outside.
        let truth: Vec<&String> = ids[..40].iter().chain(&ids[150..160]).collect();
        assert_eq!(recall_at_k(&v, &m, &truth, 100).unwrap(), 0.8);
        assert!(recall_at_k(&v, &m, &[] as &[&str], 10).is_err());
        assert!(recall_at_k(&v, &m, &ids[..1], 301).is_err());
        assert!(recall_at_k(&v, &m, &["nope"], 10).is_err());
    }

    #[test]
    fn recall_ties_go_to_lower_id() {
        let m = EmbeddingMatrix::from_rows(
            vec!["b".into(), "a".into(), "c".into()],
            &[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(recall_at_k(&[1.0, 0.0], &m, &["a"], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1.0, 0.0], &m, &["b"], 1).unwrap(), 0.0);
    }

    #[test]
    fn report_aggregates_are_breakdown_means() {
        let target = line(40);
        let ids = target.ids().to_vec();
        let prompts = EmbeddingMatrix::with_index_ids(1, 1, vec![1.0]).unwrap();
        let mut specs = Vec::new();
        let mut cavs = Vec::new();
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            let mut s = ConceptSpec::new(*name, prompts.clone())
                .unwrap()
                .with_examples(ids[..5].to_vec(), ids[35..].to_vec())
                .unwrap();
            s.test_positives = Some(ids[5..15].to_vec());
            s.test_negatives = Some(ids[25..35].to_vec());
            s.recall_truth = Some(ids[i * 3..i * 3 + 10].to_vec());
            specs.push(s);
            let mut c = cav(vec![1.0, 0.3 * i as f64], if i == 1 { None } else { Some(-0.1) });
            c.concept = name.to_string();
            cavs.push(c);
        }
        let h = head(vec![vec![1.0, 0.0], vec![-1.0, 1.0]]);
        let ps = pairs(&[("a", 0), ("b", 1), ("c", 1), ("zzz", 0)]);
        let ctx = EvalContext {
            target: &target,
            head: Some(&h),
            pairs: Some(&ps),
            recall_k: 10,
        };
        let r = evaluate(&cavs, &specs, &ctx).unwrap();
        assert_eq!(r.per_concept.len(), 3);
        assert_eq!(r.per_pair.len(), 3);
        let acc: f64 = r.per_concept.iter().map(|c| c.concept_accuracy.unwrap()).sum::<f64>() / 3.0;
        assert!((r.concept_accuracy.unwrap() - acc).abs() < 1e-12);
        let c2c: f64 = r.per_pair.iter().map(|p| p.cosine).sum::<f64>() / 3.0;
        assert!((r.concept_to_class.unwrap() - c2c).abs() < 1e-12);
        assert!(matches!(r.per_concept[1].decision, Some(Decision::FittedThreshold(_))));
        for p in &r.per_pair {
            assert_eq!(p.acute, p.cosine > 0.0);
        }

        let empty = pairs(&[]);
        let r = evaluate(&cavs, &specs, &EvalContext { pairs: Some(&empty), ..ctx }).unwrap();
        assert!(r.concept_to_class.is_none() && r.tcav_score.is_none());
    }

    proptest::proptest! {
        #[test]
        fn recall_monotone_in_k(seed in 0u64..200) {
            let mut r = numerics::rng(seed, 0);
            let rows: Vec<Vec<f64>> = (0..30)
                .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect();
            let m = EmbeddingMatrix::from_rows((0..30).map(|i| format!("{i:02}")).collect(), &rows).unwrap();
            let v: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let truth = &m.ids()[..8];
            let mut prev = 0.0;
            for k in 0..=30 {
                let rk = recall_at_k(&v, &m, truth, k).unwrap();
                proptest::prop_assert!(rk >= prev);
                prev = rk;
            }
            proptest::prop_assert_eq!(prev, 1.0);
        }
    }
}
