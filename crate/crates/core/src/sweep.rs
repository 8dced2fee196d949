//! Hyper-parameter grids over the learned projection (margin, description count).

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::embedding::{EmbeddingRecord, EmbeddingSet};
use crate::error::{Error, Result};
use crate::trainer::{train_projection, TrainConfig};
use crate::zeroshot::{classify, group_metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Margin,
    NDescriptions,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Margin => "margin",
            SweepParam::NDescriptions => "n_descriptions",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(SweepParam::Margin),
            "n_descriptions" => Ok(SweepParam::NDescriptions),
            other => Err(Error::invalid(format!(
                "unknown sweep parameter `{other}` (expected margin or n_descriptions)"
            ))),
        }
    }
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::invalid(format!("cannot parse sweep values `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    let values = if parts.len() == 3 {
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let (start, stop, step) = (nums[0], nums[1], nums[2]);
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // rounded to 12 decimals so 0.1 * 3 prints as 0.3
        (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else if parts.len() == 1 {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    } else {
        return Err(bad());
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub worst_group: f64,
    pub accuracy: f64,
    pub gap: f64,
    pub delta_wg: f64,
    pub delta_acc: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Keeps the first `n` descriptions of every group: the first `n` template ids
/// when templates are present, otherwise the first `n` records of each group.
pub fn subsample_descriptions(set: &EmbeddingSet, n: usize) -> Result<EmbeddingSet> {
    if n == 0 {
        return Err(Error::invalid("description count must be positive"));
    }
    let has_templates = set.records().iter().all(|r| r.template_id.is_some());
    let mut kept: Vec<EmbeddingRecord> = Vec::new();
    if has_templates {
        let mut templates: Vec<&str> = Vec::new();
        for r in set.records() {
            let t = r.template_id.as_deref().unwrap_or_default();
            if !templates.contains(&t) {
                templates.push(t);
            }
        }
        templates.truncate(n);
        kept.extend(
            set.records()
                .iter()
                .filter(|r| templates.contains(&r.template_id.as_deref().unwrap_or_default()))
                .cloned(),
        );
    } else {
        let mut seen = std::collections::HashMap::new();
        for r in set.records() {
            let c = seen.entry(r.group()).or_insert(0usize);
            if *c < n {
                kept.push(r.clone());
            }
            *c += 1;
        }
    }
    set.with_records(kept)
}

/// Trains one projection per value and evaluates it on the images.
///
/// Grid points run in parallel; rows come back in input order and each point
/// is a pure function of its inputs, so the output is deterministic.
pub fn run_sweep(
    descriptions: &EmbeddingSet,
    images: &EmbeddingSet,
    prompts: &EmbeddingSet,
    param: SweepParam,
    values: &[f64],
    base: &TrainConfig,
    raw_scores: bool,
) -> Result<Vec<SweepRow>> {
    let vanilla = group_metrics(&classify(images, prompts, None, raw_scores)?, None)?;
    values
        .par_iter()
        .map(|&value| {
            let mut config = base.clone();
            let pool = match param {
                SweepParam::Margin => {
                    config.margin = value;
                    descriptions.clone()
                }
                SweepParam::NDescriptions => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(Error::invalid(format!(
                            "description count must be a positive integer, got {value}"
                        )));
                    }
                    subsample_descriptions(descriptions, value as usize)?
                }
            };
            let report = train_projection(&pool, &config)?;
            let preds = classify(images, prompts, Some(&report.final_projection), raw_scores)?;
            let m = group_metrics(&preds, Some(&vanilla))?;
            Ok(SweepRow {
                param: param.as_str(),
                value,
                worst_group: m.worst_group,
                accuracy: m.accuracy,
                gap: m.gap,
                delta_wg: m.delta_wg.unwrap_or_default(),
                delta_acc: m.delta_acc.unwrap_or_default(),
                final_loss: report.final_loss.total,
                steps: report.steps,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SynthConfig};

    #[test]
    fn value_specs() {
        assert_eq!(parse_values("0.1:1.0:0.1").unwrap().len(), 10);
        assert_eq!(
            parse_values("0.2:1.0:0.2").unwrap(),
            vec![0.2, 0.4, 0.6, 0.8, 1.0]
        );
        assert_eq!(parse_values("0.2, 0.6").unwrap(), vec![0.2, 0.6]);
        assert_eq!(parse_values("5").unwrap(), vec![5.0]);
        assert!(parse_values("1:0:0.1").is_err());
        assert!(parse_values("0:1:0").is_err());
        assert!(parse_values("a,b").is_err());
    }

    #[test]
    fn subsample_keeps_first_templates() {
        let b = generate(&SynthConfig::default()).unwrap();
        let sub = subsample_descriptions(&b.descriptions, 3).unwrap();
        assert_eq!(sub.len(), 3 * 4);
        assert!(sub
            .records()
            .iter()
            .all(|r| ["t0", "t1", "t2"].contains(&r.template_id.as_deref().unwrap())));
        assert!(subsample_descriptions(&b.descriptions, 0).is_err());
    }
}
