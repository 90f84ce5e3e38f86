//! JSON-backed domain files: dataset manifest, concept specs, concept-class
//! pair sets and the linear classification head.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{load_matrix, save_matrix};
use super::matrix::EmbeddingMatrix;
use super::{read_json, write_json};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    ProbePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    #[serde(default)]
    pub label: Option<usize>,
    pub split: Split,
}

/// Items of a dataset with their class labels and splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let mut seen = HashSet::with_capacity(self.items.len());
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::DuplicateId(item.id.clone()));
            }
            if let Some(label) = item.label {
                if label >= k {
                    return Err(Error::InvalidData(format!(
                        "item {:?} has label {label} but there are {k} classes",
                        item.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.items
            .iter()
            .filter(|i| i.split == split)
            .map(|i| i.id.clone())
            .collect()
    }

    /// `(id, label)` for labelled items of `split`.
    pub fn labelled(&self, split: Split) -> Vec<(String, usize)> {
        self.items
            .iter()
            .filter(|i| i.split == split)
            .filter_map(|i| i.label.map(|l| (i.id.clone(), l)))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// A concept with its prompt embeddings and optional labelled image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpec {
    pub name: String,
    /// One row per augmented prompt, in the VL text space.
    pub prompts: EmbeddingMatrix,
    pub positives: Option<Vec<String>>,
    pub negatives: Option<Vec<String>>,
    pub test_positives: Option<Vec<String>>,
    pub test_negatives: Option<Vec<String>>,
    /// Ground-truth ids for recall@k.
    pub recall_truth: Option<Vec<String>>,
}

/// On-disk form of [`ConceptSpec`]; `prompt_embeddings` is a matrix path
/// relative to the spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpecFile {
    pub name: String,
    pub prompt_embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_positives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_negatives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_truth: Option<Vec<String>>,
}

impl ConceptSpec {
    pub fn new(name: impl Into<String>, prompts: EmbeddingMatrix) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            prompts,
            positives: None,
            negatives: None,
            test_positives: None,
            test_negatives: None,
            recall_truth: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_examples(mut self, positives: Vec<String>, negatives: Vec<String>) -> Result<Self> {
        self.positives = Some(positives);
        self.negatives = Some(negatives);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.rows() == 0 {
            return Err(Error::InvalidData(format!(
                "concept {:?} has no prompt embeddings",
                self.name
            )));
        }
        disjoint(&self.name, "positives", &self.positives, "negatives", &self.negatives)?;
        disjoint(
            &self.name,
            "test_positives",
            &self.test_positives,
            "test_negatives",
            &self.test_negatives,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ConceptSpecFile = read_json(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let prompts = load_matrix(&base.join(&file.prompt_embeddings))?;
        let spec = Self {
            name: file.name,
            prompts,
            positives: file.positives,
            negatives: file.negatives,
            test_positives: file.test_positives,
            test_negatives: file.test_negatives,
            recall_truth: file.recall_truth,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Writes the spec JSON to `path` and the prompts to `prompts_file`
    /// (relative to the spec's directory).
    pub fn save(&self, path: &Path, prompts_file: &str) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        save_matrix(&self.prompts, &base.join(prompts_file))?;
        let file = ConceptSpecFile {
            name: self.name.clone(),
            prompt_embeddings: prompts_file.to_string(),
            positives: self.positives.clone(),
            negatives: self.negatives.clone(),
            test_positives: self.test_positives.clone(),
            test_negatives: self.test_negatives.clone(),
            recall_truth: self.recall_truth.clone(),
        };
        write_json(path, &file)
    }
}

fn disjoint(
    name: &str,
    a_name: &str,
    a: &Option<Vec<String>>,
    b_name: &str,
    b: &Option<Vec<String>>,
) -> Result<()> {
    if let (Some(a), Some(b)) = (a, b) {
        let set: HashSet<&str> = a.iter().map(String::as_str).collect();
        if let Some(shared) = b.iter().find(|id| set.contains(id.as_str())) {
            return Err(Error::InvalidData(format!(
                "concept {name:?}: id {shared:?} is in both {a_name} and {b_name}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Threshold,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptClassPair {
    pub concept: String,
    pub class: usize,
}

/// Ground-truth set of positively related (concept, class) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub source: PairSource,
    pub pairs: Vec<ConceptClassPair>,
}

impl PairSet {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate<S: AsRef<str>>(&self, num_classes: usize, concepts: &[S]) -> Result<()> {
        let known: HashSet<&str> = concepts.iter().map(AsRef::as_ref).collect();
        for p in &self.pairs {
            if p.class >= num_classes {
                return Err(Error::InvalidData(format!(
                    "pair ({:?}, {}) references a class outside [0, {num_classes})",
                    p.concept, p.class
                )));
            }
            if !known.contains(p.concept.as_str()) {
                return Err(Error::missing(&p.concept, "concept specs"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Final linear layer of the target model: `logits = W f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// K x D weights; row ids are the class names.
    pub weights: EmbeddingMatrix,
    pub biases: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadFile {
    biases: Vec<f64>,
    #[serde(default)]
    provenance: BTreeMap<String, serde_json::Value>,
}

impl LinearHead {
    pub fn new(weights: EmbeddingMatrix, biases: Vec<f64>) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "{} biases for {} classes",
                biases.len(),
                weights.rows()
            )));
        }
        if let Some(k) = biases.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { row: k, col: 0 });
        }
        Ok(Self { weights, biases })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Gradient of logit `k` with respect to the features.
    pub fn class_row(&self, k: usize) -> &[f64] {
        self.weights.row(k)
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        (0..self.num_classes())
            .map(|k| crate::numerics::dot(self.weights.row(k), features) + self.biases[k])
            .collect()
    }

    /// Arg-max class; ties resolve to the smaller index.
    pub fn predict(&self, features: &[f64]) -> usize {
        let logits = self.logits(features);
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate().skip(1) {
            if l > logits[best] {
                best = k;
            }
        }
        best
    }

    /// Weights go to `<stem>.bin` (+ sidecar), biases and provenance to `<stem>.json`.
    pub fn save(
        &self,
        stem: &Path,
        provenance: BTreeMap<String, serde_json::Value>,
    ) -> Result<()> {
        save_matrix(&self.weights, &with_suffix(stem, "bin"))?;
        write_json(
            &with_suffix(stem, "json"),
            &HeadFile {
                biases: self.biases.clone(),
                provenance,
            },
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let weights = load_matrix(&with_suffix(stem, "bin"))?;
        let file: HeadFile = read_json(&with_suffix(stem, "json"))?;
        Self::new(weights, file.biases)
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn manifest_validation() {
        let mut m = DatasetManifest {
            class_names: strings(&["cat", "dog"]),
            items: vec![
                ManifestItem {
                    id: "a".into(),
                    label: Some(1),
                    split: Split::Train,
                },
                ManifestItem {
                    id: "b".into(),
                    label: None,
                    split: Split::ProbePool,
                },
            ],
        };
        m.validate().unwrap();
        assert_eq!(m.ids_in(Split::ProbePool), vec!["b".to_string()]);
        m.items[0].label = Some(2);
        assert!(m.validate().is_err());
        m.items[0].label = Some(0);
        m.items[1].id = "a".into();
        assert!(matches!(m.validate(), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn split_serializes_kebab_case() {
        assert_eq!(
            serde_json::to_string(&Split::ProbePool).unwrap(),
            "\"probe-pool\""
        );
    }

    #[test]
    fn concept_spec_rejects_overlap() {
        let prompts = EmbeddingMatrix::with_index_ids(1, 2, vec![1.0, 0.0]).unwrap();
        let spec = ConceptSpec::new("stripes", prompts).unwrap();
        assert!(spec
            .clone()
            .with_examples(strings(&["a", "b"]), strings(&["b"]))
            .is_err());
        assert!(spec.with_examples(strings(&["a"]), strings(&["b"])).is_ok());
        let empty = EmbeddingMatrix::with_index_ids(0, 2, vec![]).unwrap();
        assert!(ConceptSpec::new("x", empty).is_err());
    }

    #[test]
    fn pair_set_validation() {
        let ps = PairSet {
            source: PairSource::Explicit,
            pairs: vec![ConceptClassPair {
                concept: "c".into(),
                class: 1,
            }],
        };
        assert!(ps.validate(2, &["c"]).is_ok());
        assert!(ps.validate(1, &["c"]).is_err());
        assert!(ps.validate(2, &["d"]).is_err());
    }

    #[test]
    fn head_prediction_ties_go_low() {
        let w = EmbeddingMatrix::new(strings(&["a", "b"]), 1, vec![1.0, 1.0]).unwrap();
        let head = LinearHead::new(w, vec![0.0, 0.0]).unwrap();
        assert_eq!(head.predict(&[2.0]), 0);
        assert!(LinearHead::new(head.weights.clone(), vec![0.0]).is_err());
    }
}
