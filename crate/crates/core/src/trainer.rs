//! Learns the debiasing projection by Adam on the LD loss over scene descriptions.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingRecord, EmbeddingSet, SetKind};
use crate::error::{Error, Result};
use crate::loss::{assert_unit, loss_and_grad, shared_template_ids, LossBreakdown, LossConfig, Pairing};
use crate::projection::ProjectionMatrix;

/// Starting point of the optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Identity,
    IdentityPlusNoise {
        sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pairing: Pairing,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.6,
            learning_rate: 0.1,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pairing: Pairing::TemplateMatched,
            init: Init::Identity,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> Result<LossConfig> {
        LossConfig::new(self.margin, self.pairing)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        if let Init::IdentityPlusNoise { sigma } = self.init {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!(
                    "init noise sigma must be >= 0, got {sigma}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Batch loss at every step, evaluated before that step's update.
    pub loss_history: Vec<(usize, LossBreakdown)>,
    /// Loss over the whole description pool at the initial projection.
    pub initial_loss: LossBreakdown,
    /// Loss over the whole description pool at the final projection.
    pub final_loss: LossBreakdown,
    #[serde(skip)]
    pub final_projection: ProjectionMatrix,
    pub steps: usize,
    pub wall_time_secs: f64,
}

/// Adam with bias correction. A step with an all-zero gradient history leaves
/// the parameters untouched.
#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl Adam {
    fn new(config: &TrainConfig, dim: usize) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            m: DMatrix::zeros(dim, dim),
            v: DMatrix::zeros(dim, dim),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Group-stratified batch schedule over the description pool.
enum Schedule {
    /// Record indices of each shared template, one per group.
    Templates {
        per_template: Vec<Vec<usize>>,
        per_batch: usize,
    },
    /// Record indices of each group.
    Groups {
        per_group: Vec<Vec<usize>>,
        per_batch: usize,
    },
}

impl Schedule {
    fn new(records: &[&EmbeddingRecord], config: &TrainConfig, k: usize, a: usize) -> Result<Self> {
        let n_groups = k * a;
        match config.pairing {
            Pairing::TemplateMatched => {
                let shared = shared_template_ids(records, k, a)?;
                let per_template = shared
                    .iter()
                    .map(|t| {
                        (0..records.len())
                            .filter(|&i| records[i].template_id.as_deref() == Some(t.as_str()))
                            .collect()
                    })
                    .collect();
                Ok(Schedule::Templates {
                    per_template,
                    per_batch: (config.batch_size / n_groups).max(1),
                })
            }
            Pairing::GroupMean | Pairing::AllPairs => {
                if config.batch_size < n_groups {
                    return Err(Error::invalid(format!(
                        "batch size {} cannot hold one description from each of {n_groups} groups",
                        config.batch_size
                    )));
                }
                let mut per_group = vec![Vec::new(); n_groups];
                for (i, rec) in records.iter().enumerate() {
                    if let Some(g) = rec.group() {
                        per_group[g.attribute * k + g.class].push(i);
                    }
                }
                Ok(Schedule::Groups {
                    per_group,
                    per_batch: config.batch_size / n_groups,
                })
            }
        }
    }

    /// Batches (as record indices) for one epoch.
    fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        match self {
            Schedule::Templates {
                per_template,
                per_batch,
            } => {
                let mut order: Vec<usize> = (0..per_template.len()).collect();
                order.shuffle(rng);
                order
                    .chunks(*per_batch)
                    .map(|chunk| {
                        chunk
                            .iter()
                            .flat_map(|&t| per_template[t].iter().copied())
                            .collect()
                    })
                    .collect()
            }
            Schedule::Groups { per_group, per_batch } => {
                let shuffled: Vec<Vec<usize>> = per_group
                    .iter()
                    .map(|g| {
                        let mut g = g.clone();
                        g.shuffle(rng);
                        g
                    })
                    .collect();
                let longest = shuffled.iter().map(Vec::len).max().unwrap_or(0);
                let steps = longest.div_ceil(*per_batch);
                (0..steps)
                    .map(|s| {
                        shuffled
                            .iter()
                            .flat_map(|g| {
                                let take = (*per_batch).min(g.len());
                                (0..take).map(move |j| g[(s * per_batch + j) % g.len()])
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

fn initial_projection(config: &TrainConfig, dim: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let mut p = DMatrix::identity(dim, dim);
    if let Init::IdentityPlusNoise { sigma } = config.init {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            p.iter_mut().for_each(|x| *x += normal.sample(rng));
        }
    }
    Ok(p)
}

/// Runs `config.epochs` passes of group-stratified Adam over the description pool.
///
/// The number of classes and attributes is taken from the set's vocabularies;
/// every `(attribute, class)` group must have descriptions.
pub fn train_projection(descriptions: &EmbeddingSet, config: &TrainConfig) -> Result<TrainReport> {
    let started = Instant::now();
    config.validate()?;
    if descriptions.kind() != SetKind::SceneDescription {
        return Err(Error::invalid(format!(
            "training expects a scene_description set, got {}",
            descriptions.kind().as_str()
        )));
    }
    let k = descriptions.class_vocab().len();
    let a = descriptions.attribute_vocab().len();
    let loss_config = config.loss_config()?;
    let records: Vec<&EmbeddingRecord> = descriptions.records().iter().collect();
    assert_unit(&records)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = descriptions.dim();
    let mut params = initial_projection(config, dim, &mut rng)?;
    let initial = ProjectionMatrix::from_matrix(params.clone())?;
    let (initial_loss, _) = loss_and_grad(&records, &initial, &loss_config, k, a)?;
    let schedule = Schedule::new(&records, config, k, a)?;

    let mut adam = Adam::new(config, dim);
    let mut history = Vec::new();
    let mut step = 0;
    for _ in 0..config.epochs {
        for batch in schedule.epoch(&mut rng) {
            let batch_records: Vec<&EmbeddingRecord> = batch.iter().map(|&i| records[i]).collect();
            let current = ProjectionMatrix(params.clone());
            let (loss, grad) = loss_and_grad(&batch_records, &current, &loss_config, k, a)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteStep { step });
            }
            adam.step(&mut params, &grad);
            if params.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteStep { step });
            }
            history.push((step, loss));
            step += 1;
        }
    }

    let final_projection = ProjectionMatrix::from_matrix(params)?;
    let (final_loss, _) =
        loss_and_grad(&records, &final_projection, &loss_config, k, a).map_err(|e| match e {
            Error::Collapse(_) => Error::NonFiniteStep { step },
            other => other,
        })?;
    Ok(TrainReport {
        loss_history: history,
        initial_loss,
        final_loss,
        final_projection,
        steps: step,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stationary_set() -> EmbeddingSet {
        // class directions are orthogonal and identical across attributes: zero loss
        let mut records = Vec::new();
        for a in 0..2 {
            for y in 0..2 {
                for t in 0..3 {
                    let mut v = vec![0.0; 4];
                    v[y] = 1.0;
                    records.push(
                        EmbeddingRecord::new(format!("a{a}y{y}t{t}"), v)
                            .with_class(y)
                            .with_attribute(a)
                            .with_template(format!("t{t}")),
                    );
                }
            }
        }
        EmbeddingSet::new(
            SetKind::SceneDescription,
            4,
            vec!["c0".into(), "c1".into()],
            vec!["a0".into(), "a1".into()],
            records,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_identity() {
        for pairing in [Pairing::TemplateMatched, Pairing::GroupMean, Pairing::AllPairs] {
            let config = TrainConfig {
                pairing,
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::default()
            };
            let report = train_projection(&stationary_set(), &config).unwrap();
            assert!(report.steps >= 3);
            assert_eq!(report.final_projection, ProjectionMatrix::identity(4));
            assert!(report.loss_history.iter().all(|(_, l)| l.total == 0.0));
        }
    }

    #[test]
    fn adam_first_step_is_sign_descent() {
        let config = TrainConfig::default();
        let mut adam = Adam::new(&config, 2);
        let mut p = DMatrix::zeros(2, 2);
        let g = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, 0.0, 1e-3]);
        adam.step(&mut p, &g);
        let expected = [-0.1, 0.1, 0.0, -0.1];
        for (x, e) in p.transpose().iter().zip(expected) {
            assert!((x - e).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn schedule_is_group_stratified() {
        let set = stationary_set();
        let records: Vec<&EmbeddingRecord> = set.records().iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let batches = Schedule::new(&records, &config, 2, 2).unwrap().epoch(&mut rng);
        // 3 templates, 2 per batch
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 4]);

        let config = TrainConfig {
            batch_size: 4,
            pairing: Pairing::GroupMean,
            ..TrainConfig::default()
        };
        let batches = Schedule::new(&records, &config, 2, 2).unwrap().epoch(&mut rng);
        assert_eq!(batches.len(), 3);
        for b in &batches {
            let mut groups: Vec<_> = b.iter().map(|&i| records[i].group().unwrap()).collect();
            groups.sort();
            groups.dedup();
            assert_eq!(groups.len(), 4);
        }

        let too_small = TrainConfig {
            batch_size: 3,
            pairing: Pairing::AllPairs,
            ..TrainConfig::default()
        };
        assert!(Schedule::new(&records, &too_small, 2, 2).is_err());
    }

    #[test]
    fn missing_group_is_rejected() {
        let set = stationary_set();
        let records = set
            .records()
            .iter()
            .filter(|r| r.group() != Some(crate::GroupLabel::new(1, 1)))
            .cloned()
            .collect();
        let partial = set.with_records(records).unwrap();
        assert!(matches!(
            train_projection(&partial, &TrainConfig::default()),
            Err(Error::EmptyGroup {
                attribute: 1,
                class: 1
            })
        ));
    }

    #[test]
    fn invalid_config() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train_projection(&stationary_set(), &bad).is_err());
        let bad = TrainConfig {
            margin: -0.1,
            ..TrainConfig::default()
        };
        assert!(train_projection(&stationary_set(), &bad).is_err());
    }
}
