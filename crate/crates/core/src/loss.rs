//! Latent-space debiasing (LD) loss and its gradient with respect to the projection.
//!
//! For groups `g = (a, y)` with representative embeddings `r_g` the loss is
//!
//! ```text
//! L = 1/(K * C(|A|,2)) * sum_{y, a<a'} (1 - <r_(a,y), r_(a',y)>)
//!   + 1/(|A| * C(K,2)) * sum_{a, y<y'} max(0, <r_(a,y), r_(a,y')> - m)
//! ```
//!
//! The first term pulls same-class descriptions together across attributes; the
//! second pushes different classes sharing an attribute below similarity `m`.
//! How representatives are formed from the description pool is set by [`Pairing`];
//! in every case each term is the mean over the unordered pairs it contains.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingRecord, EmbeddingSet, SetKind, MIN_NORM, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::projection::{ProjectionMatrix, COLLAPSE_NORM};

/// How group representatives are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// One representative per (group, template); pairs only share a template.
    #[default]
    TemplateMatched,
    /// The renormalised mean of each group's descriptions.
    GroupMean,
    /// Every description of one group against every description of the other.
    AllPairs,
}

impl Pairing {
    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::TemplateMatched => "template_matched",
            Pairing::GroupMean => "group_mean",
            Pairing::AllPairs => "all_pairs",
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "template_matched" => Ok(Pairing::TemplateMatched),
            "group_mean" => Ok(Pairing::GroupMean),
            "all_pairs" => Ok(Pairing::AllPairs),
            other => Err(Error::invalid(format!(
                "unknown pairing `{other}` (expected template_matched, group_mean or all_pairs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub pairing: Pairing,
}

impl LossConfig {
    pub fn new(margin: f64, pairing: Pairing) -> Result<Self> {
        let cfg = Self { margin, pairing };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "margin must lie in [0, 1], got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Same class, different attribute: mean of `1 - cos`.
    pub intra_class: f64,
    /// Same attribute, different class: mean hinge `max(0, cos - m)`.
    pub inter_class: f64,
    pub total: f64,
    /// Number of pairs in the intra-class and inter-class terms.
    pub pair_counts: (usize, usize),
}

/// Which records form each representative, and which representatives are paired.
#[derive(Debug, Clone)]
pub(crate) struct PairPlan {
    reps: Vec<Vec<usize>>,
    intra: Vec<(usize, usize)>,
    inter: Vec<(usize, usize)>,
    mean_reps: bool,
}

impl PairPlan {
    pub(crate) fn build(
        records: &[&EmbeddingRecord],
        pairing: Pairing,
        num_classes: usize,
        num_attributes: usize,
    ) -> Result<Self> {
        if num_classes < 2 || num_attributes < 2 {
            return Err(Error::invalid(format!(
                "LD loss needs at least 2 classes and 2 attributes, got K={num_classes}, |A|={num_attributes}"
            )));
        }
        let n_groups = num_classes * num_attributes;
        let gid = |a: usize, y: usize| a * num_classes + y;

        let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (i, rec) in records.iter().enumerate() {
            let g = rec.group().ok_or_else(|| Error::InvalidRecord {
                id: rec.id.clone(),
                msg: "scene description without class or attribute label".into(),
            })?;
            if g.class >= num_classes || g.attribute >= num_attributes {
                return Err(Error::InvalidRecord {
                    id: rec.id.clone(),
                    msg: format!("group {g} outside K={num_classes}, |A|={num_attributes}"),
                });
            }
            by_group[gid(g.attribute, g.class)].push(i);
        }
        for a in 0..num_attributes {
            for y in 0..num_classes {
                if by_group[gid(a, y)].is_empty() {
                    return Err(Error::EmptyGroup {
                        attribute: a,
                        class: y,
                    });
                }
            }
        }

        let layered = |layers: usize, rep: &dyn Fn(usize, usize, usize) -> usize| {
            let mut intra = Vec::new();
            let mut inter = Vec::new();
            for layer in 0..layers {
                for y in 0..num_classes {
                    for a in 0..num_attributes {
                        for a2 in a + 1..num_attributes {
                            intra.push((rep(layer, a, y), rep(layer, a2, y)));
                        }
                    }
                }
                for a in 0..num_attributes {
                    for y in 0..num_classes {
                        for y2 in y + 1..num_classes {
                            inter.push((rep(layer, a, y), rep(layer, a, y2)));
                        }
                    }
                }
            }
            (intra, inter)
        };

        match pairing {
            Pairing::GroupMean => {
                let (intra, inter) = layered(1, &|_, a, y| gid(a, y));
                Ok(Self {
                    reps: by_group,
                    intra,
                    inter,
                    mean_reps: true,
                })
            }
            Pairing::TemplateMatched => {
                let templates = complete_templates(records, &by_group)?;
                let mut reps = Vec::with_capacity(templates.len() * n_groups);
                for members in &templates {
                    reps.extend(members.iter().map(|&i| vec![i]));
                }
                let (intra, inter) = layered(templates.len(), &|layer, a, y| layer * n_groups + gid(a, y));
                Ok(Self {
                    reps,
                    intra,
                    inter,
                    mean_reps: false,
                })
            }
            Pairing::AllPairs => {
                let mut intra = Vec::new();
                let mut inter = Vec::new();
                for y in 0..num_classes {
                    for a in 0..num_attributes {
                        for a2 in a + 1..num_attributes {
                            for &i in &by_group[gid(a, y)] {
                                intra.extend(by_group[gid(a2, y)].iter().map(|&j| (i, j)));
                            }
                        }
                    }
                }
                for a in 0..num_attributes {
                    for y in 0..num_classes {
                        for y2 in y + 1..num_classes {
                            for &i in &by_group[gid(a, y)] {
                                inter.extend(by_group[gid(a, y2)].iter().map(|&j| (i, j)));
                            }
                        }
                    }
                }
                Ok(Self {
                    reps: (0..records.len()).map(|i| vec![i]).collect(),
                    intra,
                    inter,
                    mean_reps: false,
                })
            }
        }
    }

    /// Loss value from unit vectors (one per record), plus what backward needs.
    fn forward(&self, units: &[DVector<f64>], margin: f64) -> Result<Forward> {
        let mut reps = Vec::with_capacity(self.reps.len());
        let mut pre_norms = Vec::with_capacity(self.reps.len());
        for members in &self.reps {
            if self.mean_reps {
                let mut mean = DVector::zeros(units[members[0]].len());
                for &i in members {
                    mean += &units[i];
                }
                mean /= members.len() as f64;
                let norm = mean.norm();
                if norm <= MIN_NORM {
                    return Err(Error::invalid(
                        "group mean of projected descriptions has zero norm",
                    ));
                }
                reps.push(mean / norm);
                pre_norms.push(norm);
            } else {
                reps.push(units[members[0]].clone());
                pre_norms.push(1.0);
            }
        }

        let intra_sum: f64 = self.intra.iter().map(|&(i, j)| 1.0 - reps[i].dot(&reps[j])).sum();
        let inter_sum: f64 = self
            .inter
            .iter()
            .map(|&(i, j)| (reps[i].dot(&reps[j]) - margin).max(0.0))
            .sum();
        let intra_class = intra_sum / self.intra.len() as f64;
        let inter_class = inter_sum / self.inter.len() as f64;
        Ok(Forward {
            reps,
            pre_norms,
            breakdown: LossBreakdown {
                intra_class,
                inter_class,
                total: intra_class + inter_class,
                pair_counts: (self.intra.len(), self.inter.len()),
            },
        })
    }

    /// Gradient of the loss with respect to each record's unit vector.
    fn backward(&self, fwd: &Forward, n_records: usize, margin: f64) -> Vec<DVector<f64>> {
        let dim = fwd.reps[0].len();
        let mut g_rep = vec![DVector::<f64>::zeros(dim); fwd.reps.len()];
        let ca = -1.0 / self.intra.len() as f64;
        for &(i, j) in &self.intra {
            g_rep[i].axpy(ca, &fwd.reps[j], 1.0);
            g_rep[j].axpy(ca, &fwd.reps[i], 1.0);
        }
        let cb = 1.0 / self.inter.len() as f64;
        for &(i, j) in &self.inter {
            // subgradient 0 at the kink
            if fwd.reps[i].dot(&fwd.reps[j]) > margin {
                g_rep[i].axpy(cb, &fwd.reps[j], 1.0);
                g_rep[j].axpy(cb, &fwd.reps[i], 1.0);
            }
        }

        let mut g_units = vec![DVector::<f64>::zeros(dim); n_records];
        for (r, members) in self.reps.iter().enumerate() {
            if self.mean_reps {
                let rep = &fwd.reps[r];
                let g_mean = (&g_rep[r] - rep * rep.dot(&g_rep[r])) / fwd.pre_norms[r];
                let share = 1.0 / members.len() as f64;
                for &i in members {
                    g_units[i].axpy(share, &g_mean, 1.0);
                }
            } else {
                g_units[members[0]] += &g_rep[r];
            }
        }
        g_units
    }
}

struct Forward {
    reps: Vec<DVector<f64>>,
    pre_norms: Vec<f64>,
    breakdown: LossBreakdown,
}

/// Groups the records of each template that appears in every group; templates
/// missing from some group are skipped.
fn complete_templates(records: &[&EmbeddingRecord], by_group: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let mut names: Vec<&str> = Vec::new();
    let mut table: Vec<Vec<Option<usize>>> = Vec::new();
    for (g, members) in by_group.iter().enumerate() {
        for &i in members {
            let rec = records[i];
            let t = rec.template_id.as_deref().ok_or_else(|| Error::InvalidRecord {
                id: rec.id.clone(),
                msg: "template_matched pairing needs a template id on every description".into(),
            })?;
            let ti = names.iter().position(|n| *n == t).unwrap_or_else(|| {
                names.push(t);
                table.push(vec![None; by_group.len()]);
                names.len() - 1
            });
            if table[ti][g].replace(i).is_some() {
                return Err(Error::InvalidRecord {
                    id: rec.id.clone(),
                    msg: format!("template `{t}` appears twice in the same group"),
                });
            }
        }
    }
    // templates in order of first appearance in record order
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by_key(|&ti| table[ti].iter().flatten().min().copied());
    let complete: Vec<Vec<usize>> = order
        .into_iter()
        .filter_map(|ti| table[ti].iter().copied().collect::<Option<Vec<_>>>())
        .collect();
    if complete.is_empty() {
        return Err(Error::invalid("no template is shared by every group"));
    }
    Ok(complete)
}

/// Template ids shared by every group, in order of first appearance.
pub(crate) fn shared_template_ids(
    records: &[&EmbeddingRecord],
    num_classes: usize,
    num_attributes: usize,
) -> Result<Vec<String>> {
    let plan = PairPlan::build(records, Pairing::TemplateMatched, num_classes, num_attributes)?;
    let n_groups = num_classes * num_attributes;
    Ok(plan
        .reps
        .chunks(n_groups)
        .map(|layer| records[layer[0][0]].template_id.clone().unwrap_or_default())
        .collect())
}

fn check_descriptions(set: &EmbeddingSet) -> Result<()> {
    if set.kind() != SetKind::SceneDescription {
        return Err(Error::invalid(format!(
            "LD loss expects a scene_description set, got {}",
            set.kind().as_str()
        )));
    }
    set.check_unit_norm()
}

/// LD loss on already projected, unit-norm scene descriptions.
pub fn ld_loss(
    projected: &EmbeddingSet,
    config: &LossConfig,
    num_classes: usize,
    num_attributes: usize,
) -> Result<LossBreakdown> {
    config.validate()?;
    check_descriptions(projected)?;
    let records: Vec<&EmbeddingRecord> = projected.records().iter().collect();
    let plan = PairPlan::build(&records, config.pairing, num_classes, num_attributes)?;
    let units: Vec<DVector<f64>> = records
        .iter()
        .map(|r| DVector::from_column_slice(&r.vector))
        .collect();
    Ok(plan.forward(&units, config.margin)?.breakdown)
}

/// LD loss of `raw -> P raw -> renormalise` and its gradient with respect to `P`.
pub fn ld_loss_grad(
    raw: &EmbeddingSet,
    p: &ProjectionMatrix,
    config: &LossConfig,
    num_classes: usize,
    num_attributes: usize,
) -> Result<(LossBreakdown, DMatrix<f64>)> {
    config.validate()?;
    check_descriptions(raw)?;
    p.check_finite()?;
    if p.dim() != raw.dim() {
        return Err(Error::DimMismatch {
            expected: raw.dim(),
            found: p.dim(),
        });
    }
    let records: Vec<&EmbeddingRecord> = raw.records().iter().collect();
    loss_and_grad(&records, p, config, num_classes, num_attributes)
}

/// Unchecked core of [`ld_loss_grad`] over an arbitrary record subset.
pub(crate) fn loss_and_grad(
    records: &[&EmbeddingRecord],
    p: &ProjectionMatrix,
    config: &LossConfig,
    num_classes: usize,
    num_attributes: usize,
) -> Result<(LossBreakdown, DMatrix<f64>)> {
    let plan = PairPlan::build(records, config.pairing, num_classes, num_attributes)?;
    let pm = p.matrix();
    let mut inputs = Vec::with_capacity(records.len());
    let mut units = Vec::with_capacity(records.len());
    let mut norms = Vec::with_capacity(records.len());
    for rec in records {
        let x = DVector::from_column_slice(&rec.vector);
        let z = pm * &x;
        let n = z.norm();
        if n <= COLLAPSE_NORM {
            return Err(Error::Collapse(rec.id.clone()));
        }
        units.push(z / n);
        norms.push(n);
        inputs.push(x);
    }

    let fwd = plan.forward(&units, config.margin)?;
    let g_units = plan.backward(&fwd, records.len(), config.margin);

    let d = p.dim();
    let mut grad = DMatrix::zeros(d, d);
    for i in 0..records.len() {
        let u = &units[i];
        let gz = (&g_units[i] - u * u.dot(&g_units[i])) / norms[i];
        grad.ger(1.0, &gz, &inputs[i], 1.0);
    }
    Ok((fwd.breakdown, grad))
}

/// Checks the loose unit-norm precondition on raw descriptions.
pub(crate) fn assert_unit(records: &[&EmbeddingRecord]) -> Result<()> {
    for rec in records {
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
