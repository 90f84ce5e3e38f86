//! Concept activation vector training.
//!
//! Three modes share one optimizer:
//!
//! - **original**: a binary logistic classifier on positive/negative target
//!   features; the CAV is its weight vector.
//! - **lg**: the CAV is fit so that its cosine activations on the probe
//!   images match (transformed) vision-language activations.
//! - **combined**: classification loss plus `lambda` times the weighted
//!   activation-matching loss.
//!
//! The activation targets go through Gaussian alignment (an affine map that
//! moves the VL activation moments onto the moments of pairwise cosines
//! between probe features in the target space), and probes may be
//! reweighted by how stable their similarity to the concept's positives is.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concepts::{concept_ensemble, random_probes, select_probes, ProbeSet, ProbeStrategy};
use crate::embedstore::{load_matrix, read_json, save_matrix, write_json, ConceptSpec, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::numerics::{
    self, cosine, dot, estimate_gaussian, mean_one_softmax, norm, sgd_minimize, streams,
    GaussianParams, Objective, Rng, SgdConfig,
};

/// Default cap on the number of probe pairs used for the target population.
pub const DEFAULT_PAIR_CAP: usize = 1_000_000;

/// Below this norm the cosine gradient is treated as undefined and the CAV is re-drawn.
const MIN_CAV_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CavMode {
    Original,
    Lg,
    Combined,
}

impl CavMode {
    pub fn uses_classification(self) -> bool {
        matches!(self, CavMode::Original | CavMode::Combined)
    }

    pub fn uses_guidance(self) -> bool {
        matches!(self, CavMode::Lg | CavMode::Combined)
    }
}

impl std::fmt::Display for CavMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CavMode::Original => "original",
            CavMode::Lg => "lg",
            CavMode::Combined => "combined",
        })
    }
}

/// A trained concept vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Cav {
    pub concept: String,
    pub mode: CavMode,
    pub vector: Vec<f64>,
    /// Present when the classification loss took part in training.
    pub bias: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    /// Per-epoch training loss.
    pub trace: Vec<f64>,
    /// Times the vector collapsed to ~0 and was re-drawn.
    pub rejitters: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CavFile {
    concept: String,
    mode: CavMode,
    bias: Option<f64>,
    lambda: f64,
    seed: u64,
    dim: usize,
    vector_file: String,
    trace: Vec<f64>,
    rejitters: usize,
}

impl Cav {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Writes `<stem>.json` and `<stem>.bin`. The binary stores the vector
    /// at 32-bit precision, so [`Cav::load`] returns the f32-rounded vector.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let m = EmbeddingMatrix::new(vec![self.concept.clone()], self.dim(), self.vector.clone())?;
        save_matrix(&m, &bin)?;
        let file = CavFile {
            concept: self.concept.clone(),
            mode: self.mode,
            bias: self.bias,
            lambda: self.lambda,
            seed: self.seed,
            dim: self.dim(),
            vector_file: bin
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            trace: self.trace.clone(),
            rejitters: self.rejitters,
        };
        write_json(&stem.with_extension("json"), &file)
    }

    pub fn load(json: &Path) -> Result<Self> {
        let file: CavFile = read_json(json)?;
        let base = json.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
        let m = load_matrix(&base.join(&file.vector_file))?;
        if m.rows() != 1 || m.cols() != file.dim {
            return Err(Error::Shape(format!(
                "CAV vector file is {}x{}, expected 1x{}",
                m.rows(),
                m.cols(),
                file.dim
            )));
        }
        Ok(Self {
            concept: file.concept,
            mode: file.mode,
            vector: m.row(0).to_vec(),
            bias: file.bias,
            lambda: file.lambda,
            seed: file.seed,
            trace: file.trace,
            rejitters: file.rejitters,
        })
    }
}

/// VL activation of `text` on every probe, in probe order.
pub fn vl_activations(text: &[f64], vl_img: &EmbeddingMatrix, probe: &ProbeSet) -> Result<Vec<f64>> {
    if text.len() != vl_img.cols() {
        return Err(Error::Shape(format!(
            "text embedding has dim {}, VL image features have dim {}",
            text.len(),
            vl_img.cols()
        )));
    }
    probe
        .vl_rows
        .iter()
        .map(|&r| cosine(text, vl_img.row(r)))
        .collect()
}

fn unit_rows(m: &EmbeddingMatrix, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|&r| {
            numerics::unit(m.row(r))
                .map_err(|_| Error::ZeroNorm(format!("feature row {:?} has zero norm", m.ids()[r])))
        })
        .collect()
}

/// Moments of the pairwise cosines between probe target features.
///
/// Uses every unordered pair when there are at most `cap` of them, otherwise
/// a seeded uniform sample of `cap` distinct pairs.
pub fn target_activation_population(
    tgt: &EmbeddingMatrix,
    probe: &ProbeSet,
    cap: usize,
    seed: u64,
) -> Result<GaussianParams> {
    let n = probe.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 probes".into()));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("pair cap must be >= 1".into()));
    }
    let units = unit_rows(tgt, &probe.target_rows)?;
    let total = n * (n - 1) / 2;
    let cosines: Vec<f64> = if total <= cap {
        let mut out = Vec::with_capacity(total);
        for i in 0..n {
            for j in i + 1..n {
                out.push(dot(&units[i], &units[j]));
            }
        }
        out
    } else {
        let mut rng = numerics::rng(seed, streams::PAIR_SAMPLE);
        let mut picks = rand::seq::index::sample(&mut rng, total, cap).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|l| {
                let (i, j) = unrank_pair(l, n);
                dot(&units[i], &units[j])
            })
            .collect()
    };
    if cosines.len() < 2 {
        // A single pair has no spread.
        let mu = cosines[0];
        log::warn!("target activation population has a single pair; sigma = 0");
        return GaussianParams::new(mu, 0.0);
    }
    estimate_gaussian(&cosines)
}

/// Number of pairs `(i, j)`, `i < j`, enumerated before row `i`.
fn pairs_before(i: usize, n: usize) -> usize {
    i * n - i * (i + 1) / 2
}

/// Inverse of the row-major enumeration of `{(i, j) : i < j < n}`.
fn unrank_pair(l: usize, n: usize) -> (usize, usize) {
    let (mut lo, mut hi) = (0, n - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if pairs_before(mid, n) <= l {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = if pairs_before(hi, n) <= l && hi < n - 1 { hi } else { lo };
    (i, i + 1 + (l - pairs_before(i, n)))
}

/// Affine map taking activations with moments `vl` onto moments `tgt`.
pub fn ga_transform(acts: &[f64], vl: GaussianParams, tgt: GaussianParams) -> Result<Vec<f64>> {
    if vl.sigma <= 0.0 {
        return Err(Error::Degenerate(
            "VL activations have zero spread; cannot standardize".into(),
        ));
    }
    Ok(acts
        .iter()
        .map(|a| (a - vl.mu) / vl.sigma * tgt.sigma + tgt.mu)
        .collect())
}

/// Deviation-based probe weights: probes whose cosine to the concept's
/// positives varies less get more weight. Mean weight is 1.
pub fn dsr_weights<S: AsRef<str>>(
    tgt: &EmbeddingMatrix,
    probe: &ProbeSet,
    positives: &[S],
) -> Result<Vec<f64>> {
    if positives.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "deviation reweighting needs at least 2 positives, got {}",
            positives.len()
        )));
    }
    let pos_rows = tgt
        .rows_for(positives)
        .map_err(|e| match e {
            Error::MissingId { id, .. } => Error::missing(id, "target features (positives)"),
            other => other,
        })?;
    let pos_units = unit_rows(tgt, &pos_rows)?;
    let probe_units = unit_rows(tgt, &probe.target_rows)?;
    let neg_std: Vec<f64> = probe_units
        .iter()
        .map(|x| {
            let sims: Vec<f64> = pos_units.iter().map(|p| dot(x, p)).collect();
            -estimate_gaussian(&sims).map(|g| g.sigma).unwrap_or(0.0)
        })
        .collect();
    mean_one_softmax(&neg_std)
}

/// Everything the activation-matching loss needs for one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct LgTrainPlan {
    pub probe: ProbeSet,
    /// Per-probe activation targets (after alignment, if any).
    pub targets: Vec<f64>,
    /// Per-probe loss weights, mean 1.
    pub weights: Vec<f64>,
    /// Coefficient on the activation-matching loss in combined mode.
    pub lambda: f64,
}

impl LgTrainPlan {
    pub fn new(probe: ProbeSet, targets: Vec<f64>, weights: Option<Vec<f64>>, lambda: f64) -> Result<Self> {
        let weights = weights.unwrap_or_else(|| vec![1.0; probe.len()]);
        let plan = Self {
            probe,
            targets,
            weights,
            lambda,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.probe.len();
        if self.targets.len() != n || self.weights.len() != n {
            return Err(Error::Shape(format!(
                "{} probes, {} targets, {} weights",
                n,
                self.targets.len(),
                self.weights.len()
            )));
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidData("non-finite activation target".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidData("probe weights must be positive".into()));
        }
        let mean = self.weights.iter().sum::<f64>() / n as f64;
        if (mean - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidData(format!("probe weights have mean {mean}, expected 1")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Which refinements to apply when turning VL activations into a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceOptions {
    /// Average all prompt embeddings; otherwise only the first prompt is used.
    pub concept_ensemble: bool,
    pub gaussian_alignment: bool,
    pub deviation_reweighting: bool,
    pub lambda: f64,
}

impl Default for GuidanceOptions {
    fn default() -> Self {
        Self {
            concept_ensemble: true,
            gaussian_alignment: true,
            deviation_reweighting: true,
            lambda: 1.0,
        }
    }
}

/// Where the probe images come from and how many to use.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSource<'a> {
    pub target: &'a EmbeddingMatrix,
    pub vl_img: &'a EmbeddingMatrix,
    pub pool: &'a [String],
    /// Total probes |R|; must be even (half top, half bottom).
    pub count: usize,
    pub strategy: ProbeStrategy,
    pub pair_cap: usize,
    pub seed: u64,
}

/// The text embedding a concept is guided by under `opts`.
pub fn concept_text(spec: &ConceptSpec, opts: &GuidanceOptions) -> Result<Vec<f64>> {
    if opts.concept_ensemble {
        concept_ensemble(&spec.prompts)
    } else if spec.prompts.rows() > 0 {
        Ok(spec.prompts.row(0).to_vec())
    } else {
        Err(Error::InvalidArgument(format!("concept {:?} has no prompts", spec.name)))
    }
}

/// Full guidance pipeline for one concept: text -> probes -> VL activations
/// -> alignment -> reweighting.
pub fn plan_for_concept(spec: &ConceptSpec, src: &ProbeSource, opts: &GuidanceOptions) -> Result<LgTrainPlan> {
    if src.count % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "probe count must be even, got {}",
            src.count
        )));
    }
    let text = concept_text(spec, opts)?;
    let ids = match src.strategy {
        ProbeStrategy::Activation => select_probes(src.vl_img, &text, src.pool, src.count / 2)?,
        ProbeStrategy::Random => random_probes(src.pool, src.count / 2, src.seed)?,
    };
    let probe = ProbeSet::build(ids, src.target, src.vl_img)?;
    let population = if opts.gaussian_alignment {
        Some(target_activation_population(src.target, &probe, src.pair_cap, src.seed)?)
    } else {
        None
    };
    prepare_plan(
        &text,
        src.target,
        src.vl_img,
        probe,
        population,
        spec.positives.as_deref(),
        opts,
    )
}

/// VL activations -> (optional) alignment -> (optional) reweighting.
///
/// `target_population` is required when alignment is on; reweighting is
/// skipped when fewer than two positives are available.
pub fn prepare_plan<S: AsRef<str>>(
    text: &[f64],
    target: &EmbeddingMatrix,
    vl_img: &EmbeddingMatrix,
    probe: ProbeSet,
    target_population: Option<GaussianParams>,
    positives: Option<&[S]>,
    opts: &GuidanceOptions,
) -> Result<LgTrainPlan> {
    let acts = vl_activations(text, vl_img, &probe)?;
    let targets = if opts.gaussian_alignment {
        let tgt = target_population.ok_or_else(|| {
            Error::InvalidArgument("gaussian alignment needs the target activation population".into())
        })?;
        let vl = estimate_gaussian(&acts)?;
        ga_transform(&acts, vl, tgt)?
    } else {
        acts
    };
    let weights = match positives {
        Some(p) if opts.deviation_reweighting && p.len() >= 2 => Some(dsr_weights(target, &probe, p)?),
        _ => None,
    };
    LgTrainPlan::new(probe, targets, weights, opts.lambda)
}

/// Weighted squared error between CAV cosines and targets on unit probe features.
struct GuidanceTerm {
    units: Vec<Vec<f64>>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl GuidanceTerm {
    fn new(target: &EmbeddingMatrix, plan: &LgTrainPlan) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            units: unit_rows(target, &plan.probe.target_rows)?,
            targets: plan.targets.clone(),
            weights: plan.weights.clone(),
        })
    }

    fn len(&self) -> usize {
        self.units.len()
    }

    fn eval(&self, v: &[f64], batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        let v_norm = norm(v);
        if v_norm == 0.0 {
            return Err(Error::ZeroNorm("CAV vector has zero norm".into()));
        }
        let all: Vec<usize>;
        let idx = match batch {
            Some(b) => b,
            None => {
                all = (0..self.len()).collect();
                &all
            }
        };
        let scale = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; v.len()];
        for &i in idx {
            let u = &self.units[i];
            let c = dot(v, u) / v_norm;
            let r = c - self.targets[i];
            loss += self.weights[i] * r * r;
            // d cos / dv = (u - c v / |v|) / |v|
            let k = 2.0 * self.weights[i] * r / v_norm;
            for ((g, ui), vi) in grad.iter_mut().zip(u).zip(v) {
                *g += k * (ui - c * vi / v_norm);
            }
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }
}

/// Mean logistic loss of `v . f + b` against 1/0 labels.
struct ClassificationTerm {
    feats: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl ClassificationTerm {
    fn new(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) -> Result<Self> {
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::InvalidArgument(
                "classification loss needs at least one positive and one negative".into(),
            ));
        }
        let labels = std::iter::repeat_n(1.0, pos.len())
            .chain(std::iter::repeat_n(0.0, neg.len()))
            .collect();
        Ok(Self {
            feats: pos.into_iter().chain(neg).collect(),
            labels,
        })
    }

    fn eval(&self, v: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
        let scale = 1.0 / self.feats.len() as f64;
        let mut loss = 0.0;
        let mut gv = vec![0.0; v.len()];
        let mut gb = 0.0;
        for (f, &y) in self.feats.iter().zip(&self.labels) {
            let z = dot(v, f) + b;
            // -[y ln s(z) + (1-y) ln(1-s(z))] = softplus(z) - y z
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, x) in gv.iter_mut().zip(f) {
                *g += r * x;
            }
            gb += r;
        }
        gv.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, gv, gb * scale)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss and gradient of the weighted activation-matching loss at `v`.
pub fn lg_loss_and_grad(v: &[f64], target: &EmbeddingMatrix, plan: &LgTrainPlan) -> Result<(f64, Vec<f64>)> {
    GuidanceTerm::new(target, plan)?.eval(v, None)
}

/// Mean logistic loss and its gradients `(loss, d/dv, d/db)`.
pub fn cls_loss_and_grad(v: &[f64], b: f64, pos: &[Vec<f64>], neg: &[Vec<f64>]) -> Result<(f64, Vec<f64>, f64)> {
    let term = ClassificationTerm::new(pos.to_vec(), neg.to_vec())?;
    if term.feats.iter().any(|f| f.len() != v.len()) {
        return Err(Error::Shape("feature and CAV dimensions differ".into()));
    }
    Ok(term.eval(v, b))
}

struct CavObjective {
    dim: usize,
    cls: Option<ClassificationTerm>,
    guidance: Option<(GuidanceTerm, f64)>,
}

impl Objective for CavObjective {
    fn num_samples(&self) -> usize {
        match (&self.guidance, &self.cls) {
            (Some((g, _)), _) => g.len(),
            (None, Some(c)) => c.feats.len(),
            (None, None) => 0,
        }
    }

    /// Mini-batches index the probes when guidance is active; the (small)
    /// classification set is always used in full.
    fn loss_and_grad(&self, params: &[f64], batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        let v = &params[..self.dim];
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        if let Some(cls) = &self.cls {
            let (l, gv, gb) = cls.eval(v, params[self.dim]);
            loss += l;
            grad[..self.dim].copy_from_slice(&gv);
            grad[self.dim] = gb;
        }
        if let Some((term, lambda)) = &self.guidance {
            let (l, g) = term.eval(v, batch)?;
            loss += lambda * l;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += lambda * gi;
            }
        }
        Ok((loss, grad))
    }

    fn repair(&self, params: &mut [f64], rng: &mut Rng) -> bool {
        if self.guidance.is_none() || norm(&params[..self.dim]) >= MIN_CAV_NORM {
            return false;
        }
        init_vector(&mut params[..self.dim], rng);
        log::warn!("CAV collapsed to zero norm; re-drawn");
        true
    }
}

/// `v ~ N(0, 1/D)`.
fn init_vector(v: &mut [f64], rng: &mut Rng) {
    let dist = Normal::new(0.0, (1.0 / v.len() as f64).sqrt()).expect("valid std");
    v.iter_mut().for_each(|x| *x = dist.sample(rng));
}

/// Trains one CAV.
///
/// `original` and `combined` need the concept's positives and negatives;
/// `lg` and `combined` need a plan. A plan with `lambda == 0` contributes
/// nothing, so combined mode then follows the original-mode trajectory.
pub fn train_cav(
    mode: CavMode,
    concept: &ConceptSpec,
    target: &EmbeddingMatrix,
    plan: Option<&LgTrainPlan>,
    sgd: &SgdConfig,
) -> Result<Cav> {
    let dim = target.cols();
    if dim == 0 {
        return Err(Error::Shape("target features have zero dimension".into()));
    }
    let cls = if mode.uses_classification() {
        let (pos, neg) = match (&concept.positives, &concept.negatives) {
            (Some(p), Some(n)) if !p.is_empty() && !n.is_empty() => (p, n),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{mode} CAV for {:?} needs positive and negative examples",
                    concept.name
                )))
            }
        };
        let rows = |ids: &[String]| -> Result<Vec<Vec<f64>>> {
            Ok(target.rows_for(ids)?.into_iter().map(|r| target.row(r).to_vec()).collect())
        };
        Some(ClassificationTerm::new(rows(pos)?, rows(neg)?)?)
    } else {
        None
    };
    let lambda = plan.map_or(0.0, |p| p.lambda);
    let guidance = if mode.uses_guidance() {
        let plan = plan.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{mode} CAV for {:?} needs activation targets",
                concept.name
            ))
        })?;
        // lg mode always uses the matching loss at unit weight.
        let weight = if mode == CavMode::Lg { 1.0 } else { plan.lambda };
        if weight > 0.0 {
            Some((GuidanceTerm::new(target, plan)?, weight))
        } else {
            plan.validate()?;
            None
        }
    } else {
        None
    };
    let objective = CavObjective { dim, cls, guidance };

    let mut init = vec![0.0; dim + usize::from(mode.uses_classification())];
    init_vector(&mut init[..dim], &mut numerics::rng(sgd.seed, streams::CAV_INIT));
    let out = sgd_minimize(&objective, init, sgd)?;

    let mut vector = out.params;
    let bias = mode.uses_classification().then(|| vector[dim]);
    vector.truncate(dim);
    if norm(&vector) == 0.0 {
        return Err(Error::ZeroNorm(format!("trained CAV for {:?} is zero", concept.name)));
    }
    Ok(Cav {
        concept: concept.name.clone(),
        mode,
        vector,
        bias,
        lambda: if mode == CavMode::Original { 0.0 } else { lambda },
        seed: sgd.seed,
        trace: out.trace,
        rejitters: out.repairs,
    })
}
