//! Head correction: fine-tune the final linear layer with per-image weights
//! derived from concept activations, and find the class each class is most
//! often confused with.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cavtrain::Cav;
use crate::embedstore::{EmbeddingMatrix, LinearHead};
use crate::error::{Error, Result};
use crate::numerics::{cosine, mean_one_softmax, sgd_minimize, BatchMode, Objective, SgdConfig};

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Softmax-normalized CAV activations over one class's training images (mean 1).
pub fn asr_weights<S: AsRef<str>>(v: &[f64], tgt: &EmbeddingMatrix, class_items: &[S]) -> Result<Vec<f64>> {
    if class_items.is_empty() {
        return Err(Error::InvalidArgument("class has no training items".into()));
    }
    let acts = class_items
        .iter()
        .map(|id| cosine(v, tgt.row_by_id(id.as_ref())?))
        .collect::<Result<Vec<_>>>()?;
    mean_one_softmax(&acts)
}

/// Weights for one class's training images, guided by one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub class: usize,
    pub concept: String,
    pub items: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrPlan {
    pub classes: Vec<ClassWeights>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch: BatchMode,
}

impl AsrPlan {
    /// A plan with no reweighted classes: plain head fine-tuning.
    pub fn uniform(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            classes: Vec::new(),
            epochs,
            learning_rate,
            seed,
            batch: BatchMode::Full,
        }
    }

    /// Reweights class `k`'s training images by `cav` for each `(k, cav)`.
    pub fn build(
        assignments: &[(usize, &Cav)],
        feats: &EmbeddingMatrix,
        train: &[(String, usize)],
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let classes = assignments
            .par_iter()
            .map(|&(k, cav)| {
                let items: Vec<String> = train
                    .iter()
                    .filter(|(_, y)| *y == k)
                    .map(|(id, _)| id.clone())
                    .collect();
                let weights = asr_weights(&cav.vector, feats, &items)?;
                Ok(ClassWeights {
                    class: k,
                    concept: cav.concept.clone(),
                    items,
                    weights,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = Self {
            classes,
            ..Self::uniform(epochs, learning_rate, seed)
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.class) {
                return Err(Error::InvalidArgument(format!("class {} weighted twice", c.class)));
            }
            if c.items.len() != c.weights.len() || c.items.is_empty() {
                return Err(Error::Shape(format!(
                    "class {}: {} items, {} weights",
                    c.class,
                    c.items.len(),
                    c.weights.len()
                )));
            }
            if c.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                return Err(Error::InvalidData(format!("class {} has non-positive weights", c.class)));
            }
            let mean = c.weights.iter().sum::<f64>() / c.weights.len() as f64;
            if (mean - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidData(format!("class {} weights have mean {mean}", c.class)));
            }
        }
        self.sgd().validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome {
    pub head: LinearHead,
    pub trace: Vec<f64>,
}

/// Mean (optionally weighted) softmax cross-entropy of a linear head.
/// Parameters are the K x D weights row-major, then the K biases.
struct HeadObjective {
    k: usize,
    d: usize,
    feats: Vec<Vec<f64>>,
    labels: Vec<usize>,
    weights: Option<Vec<f64>>,
}

impl Objective for HeadObjective {
    fn num_samples(&self) -> usize {
        self.feats.len()
    }

    fn loss_and_grad(&self, params: &[f64], batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        let (k, d) = (self.k, self.d);
        let (w, b) = params.split_at(k * d);
        let all: Vec<usize>;
        let idx = match batch {
            Some(b) => b,
            None => {
                all = (0..self.feats.len()).collect();
                &all
            }
        };
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut probs = vec![0.0; k];
        for &i in idx {
            let f = &self.feats[i];
            for (c, p) in probs.iter_mut().enumerate() {
                *p = crate::numerics::dot(&w[c * d..(c + 1) * d], f) + b[c];
            }
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let y = self.labels[i];
            let mut item_loss = z.ln() - probs[y].ln();
            probs.iter_mut().for_each(|p| *p /= z);
            probs[y] -= 1.0;
            if let Some(ws) = &self.weights {
                item_loss *= ws[i];
                probs.iter_mut().for_each(|p| *p *= ws[i]);
            }
            loss += item_loss;
            for (c, r) in probs.iter().enumerate() {
                for (g, x) in grad[c * d..(c + 1) * d].iter_mut().zip(f) {
                    *g += r * x;
                }
                grad[k * d + c] += r;
            }
        }
        let scale = 1.0 / idx.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }
}

fn labelled_rows(feats: &EmbeddingMatrix, labelled: &[(String, usize)], k: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if labelled.is_empty() {
        return Err(Error::InvalidArgument("no labelled training items".into()));
    }
    let mut rows = Vec::with_capacity(labelled.len());
    let mut labels = Vec::with_capacity(labelled.len());
    for (id, y) in labelled {
        if *y >= k {
            return Err(Error::InvalidData(format!("item {id:?} has label {y} but the head has {k} classes")));
        }
        rows.push(feats.row_by_id(id)?.to_vec());
        labels.push(*y);
    }
    Ok((rows, labels))
}

fn run(head: &LinearHead, feats: &EmbeddingMatrix, labelled: &[(String, usize)], weights: Option<Vec<f64>>, sgd: &SgdConfig) -> Result<FineTuneOutcome> {
    if feats.cols() != head.dim() {
        return Err(Error::Shape(format!(
            "features have dim {}, head expects {}",
            feats.cols(),
            head.dim()
        )));
    }
    let (k, d) = (head.num_classes(), head.dim());
    let (rows, labels) = labelled_rows(feats, labelled, k)?;
    let objective = HeadObjective {
        k,
        d,
        feats: rows,
        labels,
        weights,
    };
    let mut init = head.weights.data().to_vec();
    init.extend_from_slice(&head.biases);
    let out = sgd_minimize(&objective, init, sgd)?;
    let (w, b) = out.params.split_at(k * d);
    let weights = EmbeddingMatrix::new(head.weights.ids().to_vec(), d, w.to_vec())?;
    Ok(FineTuneOutcome {
        head: LinearHead::new(weights, b.to_vec())?,
        trace: out.trace,
    })
}

/// Plain (unweighted) fine-tuning of `head` on frozen features.
pub fn train_head(head: &LinearHead, feats: &EmbeddingMatrix, labelled: &[(String, usize)], sgd: &SgdConfig) -> Result<FineTuneOutcome> {
    run(head, feats, labelled, None, sgd)
}

/// Fine-tunes `head` starting from its current parameters, weighting each
/// training image by the plan (weight 1 for classes the plan does not cover).
pub fn fine_tune_head(head: &LinearHead, feats: &EmbeddingMatrix, labelled: &[(String, usize)], plan: &AsrPlan) -> Result<FineTuneOutcome> {
    plan.validate()?;
    let mut lookup: HashMap<&str, (usize, f64)> = HashMap::new();
    for c in &plan.classes {
        for (id, w) in c.items.iter().zip(&c.weights) {
            lookup.insert(id.as_str(), (c.class, *w));
        }
    }
    let mut weights = Vec::with_capacity(labelled.len());
    for (id, y) in labelled {
        match lookup.remove(id.as_str()) {
            Some((class, w)) if class == *y => weights.push(w),
            Some((class, _)) => {
                return Err(Error::InvalidData(format!(
                    "item {id:?} weighted for class {class} but labelled {y}"
                )))
            }
            None if plan.classes.iter().any(|c| c.class == *y) => {
                return Err(Error::InvalidData(format!("item {id:?} of class {y} has no weight")))
            }
            None => weights.push(1.0),
        }
    }
    if let Some(id) = lookup.keys().next() {
        return Err(Error::missing(*id, "labelled training items"));
    }
    run(head, feats, labelled, Some(weights), &plan.sgd())
}

/// Fraction of items whose predicted class matches the label.
pub fn head_accuracy(head: &LinearHead, feats: &EmbeddingMatrix, labelled: &[(String, usize)]) -> Result<f64> {
    if labelled.is_empty() {
        return Err(Error::InvalidArgument("no labelled items to score".into()));
    }
    let mut correct = 0usize;
    for (id, y) in labelled {
        if head.predict(feats.row_by_id(id)?) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labelled.len() as f64)
}

/// `m[i][j]`: items of true class `i` predicted as `j`.
pub fn confusion_matrix(head: &LinearHead, feats: &EmbeddingMatrix, labelled: &[(String, usize)]) -> Result<Vec<Vec<usize>>> {
    let k = head.num_classes();
    let mut m = vec![vec![0usize; k]; k];
    for (id, y) in labelled {
        if *y >= k {
            return Err(Error::InvalidData(format!("item {id:?} has label {y} but the head has {k} classes")));
        }
        m[*y][head.predict(feats.row_by_id(id)?)] += 1;
    }
    Ok(m)
}

/// The class that class `k` is most often mistaken for (ties: smaller index).
pub fn confused_class(confusion: &[Vec<usize>], k: usize) -> Result<usize> {
    let row = confusion
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("class {k} not in confusion matrix")))?;
    let mut best: Option<(usize, usize)> = None;
    for (j, &count) in row.iter().enumerate() {
        if j != k && count > 0 && best.is_none_or(|(_, c)| count > c) {
            best = Some((j, count));
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::InvalidData(format!("class {k} has no misclassifications")))
}

/// Prompt contrasting class `k` with the class it is confused with.
pub fn confused_prompt<S: AsRef<str>>(class_names: &[S], k: usize, k_confused: usize) -> Result<String> {
    if k == k_confused {
        return Err(Error::InvalidArgument(format!("class {k} cannot be contrasted with itself")));
    }
    let name = |i: usize| {
        class_names
            .get(i)
            .map(AsRef::as_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("class index {i} has no name")))
    };
    Ok(format!("a photo of {}, not {}", name(k)?, name(k_confused)?))
}
