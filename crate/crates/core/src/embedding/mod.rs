//! Annotated embedding sets.
//!
//! An [`EmbeddingSet`] is the unit of data exchanged between every stage of the
//! pipeline: images, class prompts, scene descriptions and attribute texts are
//! all stored this way. Vectors are held in `f64`; the on-disk payload is `f32`.

mod embf;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embf::{load_embedding_csv, load_embedding_set, save_embedding_set, EMBF_FORMAT, EMBF_VERSION};

/// Tolerance used when checking that a vector is unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Norms at or below this are treated as zero by [`normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// What a set's vectors encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    ClassPrompt,
    SceneDescription,
    Image,
    Attribute,
}

impl SetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SetKind::ClassPrompt => "class_prompt",
            SetKind::SceneDescription => "scene_description",
            SetKind::Image => "image",
            SetKind::Attribute => "attribute",
        }
    }
}

impl std::str::FromStr for SetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_prompt" => Ok(SetKind::ClassPrompt),
            "scene_description" => Ok(SetKind::SceneDescription),
            "image" => Ok(SetKind::Image),
            "attribute" => Ok(SetKind::Attribute),
            other => Err(Error::invalid(format!("unknown set kind `{other}`"))),
        }
    }
}

/// A group `g = (a, y)`: spurious attribute index and class index.
///
/// Ordered attribute-major so that iterating a `BTreeMap<GroupLabel, _>` visits
/// groups in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupLabel {
    pub attribute: usize,
    pub class: usize,
}

impl GroupLabel {
    pub fn new(attribute: usize, class: usize) -> Self {
        Self { attribute, class }
    }
}

impl std::fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(a={}, y={})", self.attribute, self.class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
    pub class_label: Option<usize>,
    pub attribute_label: Option<usize>,
    /// Scene template that produced this description, if any.
    pub template_id: Option<String>,
    pub text: Option<String>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            vector,
            class_label: None,
            attribute_label: None,
            template_id: None,
            text: None,
        }
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class_label = Some(class);
        self
    }

    pub fn with_attribute(mut self, attribute: usize) -> Self {
        self.attribute_label = Some(attribute);
        self
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template_id = Some(template.into());
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    /// The record's group, if both labels are present.
    pub fn group(&self) -> Option<GroupLabel> {
        Some(GroupLabel::new(self.attribute_label?, self.class_label?))
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }
}

/// A validated, dimension-consistent collection of annotated embeddings.
///
/// Construction goes through [`EmbeddingSet::new`], which enforces every
/// invariant; there is no way to mutate a set afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    kind: SetKind,
    dim: usize,
    class_vocab: Vec<String>,
    attribute_vocab: Vec<String>,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(
        kind: SetKind,
        dim: usize,
        class_vocab: Vec<String>,
        attribute_vocab: Vec<String>,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self> {
        let set = Self {
            kind,
            dim,
            class_vocab,
            attribute_vocab,
            records,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for rec in &self.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
            if rec.vector.len() != self.dim {
                return Err(Error::InvalidRecord {
                    id: rec.id.clone(),
                    msg: format!("vector has length {}, set dim is {}", rec.vector.len(), self.dim),
                });
            }
            if let Some(index) = rec.vector.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    id: rec.id.clone(),
                    index,
                });
            }
            if let Some(c) = rec.class_label {
                if c >= self.class_vocab.len() {
                    return Err(Error::InvalidRecord {
                        id: rec.id.clone(),
                        msg: format!(
                            "class label {c} outside vocabulary of size {}",
                            self.class_vocab.len()
                        ),
                    });
                }
            }
            if let Some(a) = rec.attribute_label {
                if a >= self.attribute_vocab.len() {
                    return Err(Error::InvalidRecord {
                        id: rec.id.clone(),
                        msg: format!(
                            "attribute label {a} outside vocabulary of size {}",
                            self.attribute_vocab.len()
                        ),
                    });
                }
            }
            let bad = match self.kind {
                SetKind::SceneDescription if rec.group().is_none() => {
                    Some("scene descriptions need both class and attribute labels")
                }
                SetKind::ClassPrompt if rec.class_label.is_none() => Some("class prompts need a class label"),
                SetKind::ClassPrompt if rec.attribute_label.is_some() => {
                    Some("class prompts must not carry an attribute label")
                }
                SetKind::Attribute if rec.attribute_label.is_none() => {
                    Some("attribute embeddings need an attribute label")
                }
                _ => None,
            };
            if let Some(msg) = bad {
                return Err(Error::InvalidRecord {
                    id: rec.id.clone(),
                    msg: msg.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> SetKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_vocab(&self) -> &[String] {
        &self.class_vocab
    }

    pub fn attribute_vocab(&self) -> &[String] {
        &self.attribute_vocab
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    /// Builds a set with the same kind and vocabularies but different records.
    pub fn with_records(&self, records: Vec<EmbeddingRecord>) -> Result<Self> {
        Self::new(
            self.kind,
            self.dim,
            self.class_vocab.clone(),
            self.attribute_vocab.clone(),
            records,
        )
    }

    /// Checks every vector is unit norm within [`UNIT_NORM_TOL`].
    pub fn check_unit_norm(&self) -> Result<()> {
        for rec in &self.records {
            let norm = rec.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotUnitNorm {
                    id: rec.id.clone(),
                    norm,
                });
            }
        }
        Ok(())
    }

    /// Replaces the vectors in record order, keeping every annotation.
    pub(crate) fn map_vectors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&EmbeddingRecord) -> Result<Vec<f64>>,
    {
        let records = self
            .records
            .iter()
            .map(|rec| {
                Ok(EmbeddingRecord {
                    vector: f(rec)?,
                    ..rec.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_records(records)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales every vector to unit Euclidean norm.
pub fn normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    set.map_vectors(|rec| {
        let norm = rec.norm();
        if norm <= MIN_NORM {
            return Err(Error::ZeroNorm(rec.id.clone()));
        }
        Ok(rec.vector.iter().map(|x| x / norm).collect())
    })
}

/// Buckets record indices by `(attribute, class)`.
pub fn partition_by_group(set: &EmbeddingSet) -> Result<BTreeMap<GroupLabel, Vec<usize>>> {
    let mut buckets: BTreeMap<GroupLabel, Vec<usize>> = BTreeMap::new();
    for (i, rec) in set.records().iter().enumerate() {
        let group = rec.group().ok_or_else(|| Error::InvalidRecord {
            id: rec.id.clone(),
            msg: "missing class or attribute label".into(),
        })?;
        buckets.entry(group).or_default().push(i);
    }
    Ok(buckets)
}
