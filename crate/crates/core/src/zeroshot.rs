//! Zero-shot classification (plain or in a projected space) and group-robustness metrics.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_norm, EmbeddingSet, GroupLabel, SetKind};
use crate::error::{Error, Result};
use crate::projection::{ProjectionMatrix, COLLAPSE_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted_class: usize,
    pub true_class: Option<usize>,
    pub attribute: Option<usize>,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn group(&self) -> Option<GroupLabel> {
        Some(GroupLabel::new(self.attribute?, self.true_class?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub num_classes: usize,
    pub predictions: Vec<Prediction>,
}

/// Index of the largest score; ties go to the smaller index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

fn embed(p: Option<&ProjectionMatrix>, v: &[f64], id: &str, renormalize: bool) -> Result<Vec<f64>> {
    let mut z = match p {
        Some(p) => p.apply(v),
        None => v.to_vec(),
    };
    if renormalize {
        let norm = l2_norm(&z);
        if norm <= COLLAPSE_NORM {
            return Err(Error::Collapse(id.to_string()));
        }
        z.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(z)
}

/// Scores every image against every class prompt and predicts the argmax.
///
/// Without `raw_scores`, both sides are rescaled to unit length after the
/// optional projection, so scores are cosine similarities. A projection shrinks
/// class prompts by different amounts, which would otherwise act as a class
/// prior. With `raw_scores` the plain inner product of the mapped vectors is used.
pub fn classify(
    images: &EmbeddingSet,
    class_prompts: &EmbeddingSet,
    projection: Option<&ProjectionMatrix>,
    raw_scores: bool,
) -> Result<PredictionSet> {
    if class_prompts.kind() != SetKind::ClassPrompt {
        return Err(Error::invalid(format!(
            "prompts must be a class_prompt set, got {}",
            class_prompts.kind().as_str()
        )));
    }
    if images.dim() != class_prompts.dim() {
        return Err(Error::DimMismatch {
            expected: class_prompts.dim(),
            found: images.dim(),
        });
    }
    if let Some(p) = projection {
        if p.dim() != images.dim() {
            return Err(Error::DimMismatch {
                expected: images.dim(),
                found: p.dim(),
            });
        }
    }

    let k = class_prompts.len();
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 class prompts, got {k}")));
    }
    let mut by_class: Vec<Option<&crate::EmbeddingRecord>> = vec![None; k];
    for rec in class_prompts.records() {
        let c = rec.class_label.unwrap_or(usize::MAX);
        if c >= k {
            return Err(Error::InvalidRecord {
                id: rec.id.clone(),
                msg: format!("class prompt label must be in 0..{k}"),
            });
        }
        if by_class[c].replace(rec).is_some() {
            return Err(Error::InvalidRecord {
                id: rec.id.clone(),
                msg: format!("second prompt for class {c}"),
            });
        }
    }
    let prompts = by_class
        .into_iter()
        .enumerate()
        .map(|(c, rec)| {
            let rec = rec.ok_or_else(|| Error::invalid(format!("missing class prompt for class {c}")))?;
            embed(projection, &rec.vector, &rec.id, !raw_scores)
        })
        .collect::<Result<Vec<_>>>()?;

    let predictions = images
        .records()
        .par_iter()
        .map(|rec| {
            let z = embed(projection, &rec.vector, &rec.id, !raw_scores)?;
            let scores: Vec<f64> = prompts
                .iter()
                .map(|t| z.iter().zip(t).map(|(a, b)| a * b).sum())
                .collect();
            Ok(Prediction {
                id: rec.id.clone(),
                predicted_class: argmax(&scores),
                true_class: rec.class_label,
                attribute: rec.attribute_label,
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet {
        num_classes: k,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub attribute: usize,
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Accuracy fields are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub per_group_accuracy: Vec<GroupAccuracy>,
    /// Lowest accuracy over non-empty groups.
    pub worst_group: f64,
    /// Fraction of all records classified correctly.
    pub accuracy: f64,
    /// `accuracy - worst_group`.
    pub gap: f64,
    pub delta_wg: Option<f64>,
    pub delta_acc: Option<f64>,
}

pub fn group_metrics(preds: &PredictionSet, baseline: Option<&GroupMetrics>) -> Result<GroupMetrics> {
    if preds.predictions.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let mut counts: BTreeMap<GroupLabel, (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0;
    for p in &preds.predictions {
        let g = p.group().ok_or_else(|| Error::InvalidRecord {
            id: p.id.clone(),
            msg: "prediction lacks true class or attribute".into(),
        })?;
        let hit = usize::from(p.predicted_class == g.class);
        let entry = counts.entry(g).or_default();
        entry.0 += hit;
        entry.1 += 1;
        correct_total += hit;
    }
    let per_group_accuracy: Vec<GroupAccuracy> = counts
        .into_iter()
        .map(|(g, (correct, total))| GroupAccuracy {
            attribute: g.attribute,
            class: g.class,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    let worst_group = per_group_accuracy
        .iter()
        .map(|g| g.accuracy)
        .fold(f64::INFINITY, f64::min);
    let accuracy = correct_total as f64 / preds.predictions.len() as f64;
    Ok(GroupMetrics {
        per_group_accuracy,
        worst_group,
        accuracy,
        gap: accuracy - worst_group,
        delta_wg: baseline.map(|b| worst_group - b.worst_group),
        delta_acc: baseline.map(|b| accuracy - b.accuracy),
    })
}

impl GroupMetrics {
    /// Plain-text table with percentages.
    pub fn table(&self) -> String {
        let mut out = format!("{:<14}{:>7}  {:>7}\n", "group", "n", "acc");
        for g in &self.per_group_accuracy {
            let label = format!("(a={}, y={})", g.attribute, g.class);
            out.push_str(&format!(
                "{label:<14}{:>7}  {:>6.1}%\n",
                g.total,
                100.0 * g.accuracy
            ));
        }
        out.push_str(&format!("WG   {:>6.1}%\n", 100.0 * self.worst_group));
        out.push_str(&format!("Acc  {:>6.1}%\n", 100.0 * self.accuracy));
        out.push_str(&format!("Gap  {:>6.1}%\n", 100.0 * self.gap));
        if let (Some(dwg), Some(dacc)) = (self.delta_wg, self.delta_acc) {
            out.push_str(&format!("dWG  {:>+6.1}%\n", 100.0 * dwg));
            out.push_str(&format!("dAcc {:>+6.1}%\n", 100.0 * dacc));
        }
        out
    }
}

/// Writes `id,true_class,attribute,pred_class,score_0..score_{K-1}`.
pub fn write_predictions(preds: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["id", "true_class", "attribute", "pred_class"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..preds.num_classes).map(|k| format!("score_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
    for p in &preds.predictions {
        let mut row = vec![
            p.id.clone(),
            opt(p.true_class),
            opt(p.attribute),
            p.predicted_class.to_string(),
        ];
        row.extend(p.scores.iter().map(|s| s.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let fixed = ["id", "true_class", "attribute", "pred_class"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(Error::invalid(format!(
            "{}: expected header id,true_class,attribute,pred_class,score_0,...",
            path.display()
        )));
    }
    let k = header.len() - fixed.len();
    let mut predictions = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let id = row[0].to_string();
        let bad = |what: &str| Error::InvalidRecord {
            id: id.clone(),
            msg: format!("unparseable {what}"),
        };
        let opt = |cell: &str, what: &str| -> Result<Option<usize>> {
            if cell.is_empty() {
                Ok(None)
            } else {
                cell.parse().map(Some).map_err(|_| bad(what))
            }
        };
        let scores = row
            .iter()
            .skip(fixed.len())
            .map(|s| s.parse::<f64>().map_err(|_| bad("score")))
            .collect::<Result<Vec<_>>>()?;
        predictions.push(Prediction {
            true_class: opt(&row[1], "true_class")?,
            attribute: opt(&row[2], "attribute")?,
            predicted_class: row[3].parse().map_err(|_| bad("pred_class"))?,
            scores,
            id,
        });
    }
    Ok(PredictionSet {
        num_classes: k,
        predictions,
    })
}

pub fn write_metrics(metrics: &GroupMetrics, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut json = serde_json::to_vec_pretty(metrics).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    json.push(b'\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<GroupMetrics> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
