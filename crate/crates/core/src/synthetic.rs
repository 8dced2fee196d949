//! Planted-bias embedding benchmark with known ground truth.
//!
//! Every sample of group `(a, y)` is a convex mix of a class ("core") direction
//! and an attribute ("spurious") direction plus isotropic noise:
//!
//! ```text
//! image(a, y)          = normalize((1 - w) core_y + w spu_a + eps)
//! description(a, y, t) = normalize((1 - w) core_y + w spu_a + delta_t)
//! prompt(y)            = normalize(core_y + c spu_{a*(y)} + eta)
//! attribute(a)         = normalize(spu_a + noise)
//! ```
//!
//! `a*(y) = y mod |A|` is the attribute that co-occurs with class `y` in the
//! majority group, and `c` is the prompt contamination weight (0 when
//! contamination is off). Core and spurious directions are mutually orthonormal,
//! so removing the spurious span leaves a classifier that only sees core content.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{
    load_embedding_set, save_embedding_set, EmbeddingRecord, EmbeddingSet, GroupLabel, SetKind,
};
use crate::error::{Error, Result};
use crate::zeroshot::{argmax, Prediction, PredictionSet};

pub const IMAGES_FILE: &str = "images.embf";
pub const PROMPTS_FILE: &str = "class_prompts.embf";
pub const DESCRIPTIONS_FILE: &str = "descriptions.embf";
pub const ATTRIBUTES_FILE: &str = "attributes.embf";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub attribute: usize,
    pub class: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    /// Weight `w` of the spurious direction, in `[0, 1)`.
    pub spurious_weight: f64,
    /// Per-component standard deviation of image noise.
    pub noise_sigma: f64,
    /// Images per class when `group_sizes` is not given.
    pub samples_per_class: usize,
    /// Fraction of each class drawn from its class-aligned attribute.
    pub correlation: f64,
    /// Explicit per-group image counts; overrides `samples_per_class` and `correlation`.
    pub group_sizes: Option<Vec<GroupCount>>,
    pub n_descriptions_per_group: usize,
    /// Per-component standard deviation of the template offsets `delta_t`.
    pub template_sigma: f64,
    /// Per-component standard deviation of noise private to each description.
    pub description_noise: f64,
    pub prompt_noise: f64,
    pub attribute_noise: f64,
    pub prompt_contamination: bool,
    pub contamination_weight: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            num_classes: 2,
            num_attributes: 2,
            spurious_weight: 0.6,
            noise_sigma: 0.05,
            samples_per_class: 500,
            correlation: 0.9,
            group_sizes: None,
            n_descriptions_per_group: 10,
            template_sigma: 0.05,
            description_noise: 0.0,
            prompt_noise: 0.01,
            attribute_noise: 0.01,
            prompt_contamination: true,
            contamination_weight: 0.7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.num_classes < 2 || self.num_attributes < 1 {
            return fail(format!(
                "need at least 2 classes and 1 attribute, got K={}, |A|={}",
                self.num_classes, self.num_attributes
            ));
        }
        if self.num_classes + self.num_attributes > self.dim {
            return fail(format!(
                "K + |A| = {} exceeds dim {}",
                self.num_classes + self.num_attributes,
                self.dim
            ));
        }
        if !(0.0..1.0).contains(&self.spurious_weight) {
            return fail(format!(
                "spurious_weight must lie in [0, 1), got {}",
                self.spurious_weight
            ));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return fail(format!(
                "correlation must lie in [0, 1], got {}",
                self.correlation
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("template_sigma", self.template_sigma),
            ("description_noise", self.description_noise),
            ("prompt_noise", self.prompt_noise),
            ("attribute_noise", self.attribute_noise),
            ("contamination_weight", self.contamination_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.n_descriptions_per_group == 0 {
            return fail("n_descriptions_per_group must be positive".into());
        }
        if let Some(sizes) = &self.group_sizes {
            for g in sizes {
                if g.class >= self.num_classes || g.attribute >= self.num_attributes {
                    return fail(format!(
                        "group size given for unknown group (a={}, y={})",
                        g.attribute, g.class
                    ));
                }
            }
        }
        Ok(())
    }

    /// Attribute that co-occurs with `class` in its majority group.
    pub fn aligned_attribute(&self, class: usize) -> usize {
        class % self.num_attributes
    }

    /// Image count of every group, in group order.
    pub fn resolved_group_sizes(&self) -> BTreeMap<GroupLabel, usize> {
        let mut sizes = BTreeMap::new();
        if let Some(explicit) = &self.group_sizes {
            for a in 0..self.num_attributes {
                for y in 0..self.num_classes {
                    sizes.insert(GroupLabel::new(a, y), 0);
                }
            }
            for g in explicit {
                sizes.insert(GroupLabel::new(g.attribute, g.class), g.count);
            }
            return sizes;
        }
        let n = self.samples_per_class;
        let majority = if self.num_attributes == 1 {
            n
        } else {
            (self.correlation * n as f64).round() as usize
        };
        let rest = n - majority;
        let others = self.num_attributes.saturating_sub(1).max(1);
        for y in 0..self.num_classes {
            let aligned = self.aligned_attribute(y);
            let mut rank = 0;
            for a in 0..self.num_attributes {
                let count = if a == aligned {
                    majority
                } else {
                    let c = rest / others + usize::from(rank < rest % others);
                    rank += 1;
                    c
                };
                sizes.insert(GroupLabel::new(a, y), count);
            }
        }
        sizes
    }
}

/// Generator state needed to re-create the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub core_directions: Vec<Vec<f64>>,
    pub spurious_directions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub images: EmbeddingSet,
    pub class_prompts: EmbeddingSet,
    pub descriptions: EmbeddingSet,
    pub attributes: EmbeddingSet,
    pub truth: SynthTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

/// `count` orthonormal vectors from Gaussian draws (Gram-Schmidt, applied twice).
fn orthonormal_directions(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Result<Vec<DVector<f64>>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let n = v.norm();
        // a near-degenerate draw is discarded and redrawn
        if n > 1e-6 {
            basis.push(v / n);
        }
    }
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            if (a.dot(b) - target).abs() > 1e-10 {
                return Err(Error::invalid("failed to build orthonormal directions"));
            }
        }
    }
    Ok(basis)
}

fn unit(v: DVector<f64>) -> Vec<f64> {
    let n = v.norm();
    (v / n).data.into()
}

pub fn generate(config: &SynthConfig) -> Result<SynthBundle> {
    config.validate()?;
    let (d, k, na) = (config.dim, config.num_classes, config.num_attributes);
    let w = config.spurious_weight;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let dirs = orthonormal_directions(&mut rng, d, k + na)?;
    let (core, spurious) = dirs.split_at(k);
    let mix = |y: usize, a: usize| &core[y] * (1.0 - w) + &spurious[a] * w;

    let class_vocab: Vec<String> = (0..k).map(|y| format!("class_{y}")).collect();
    let attribute_vocab: Vec<String> = (0..na).map(|a| format!("attribute_{a}")).collect();
    let set =
        |kind, records| EmbeddingSet::new(kind, d, class_vocab.clone(), attribute_vocab.clone(), records);

    let contamination = if config.prompt_contamination {
        config.contamination_weight
    } else {
        0.0
    };
    let prompts = (0..k)
        .map(|y| {
            let v = &core[y]
                + &spurious[config.aligned_attribute(y)] * contamination
                + gaussian(&mut rng, d, config.prompt_noise);
            EmbeddingRecord::new(format!("prompt_{y}"), unit(v))
                .with_class(y)
                .with_text(format!("A photo of a {}", class_vocab[y]))
        })
        .collect();

    let templates: Vec<DVector<f64>> = (0..config.n_descriptions_per_group)
        .map(|_| gaussian(&mut rng, d, config.template_sigma))
        .collect();
    let mut descriptions = Vec::with_capacity(templates.len() * k * na);
    for (t, delta) in templates.iter().enumerate() {
        for (a, attr_name) in attribute_vocab.iter().enumerate() {
            for (y, class_name) in class_vocab.iter().enumerate() {
                descriptions.push(
                    EmbeddingRecord::new(
                        format!("desc_a{a}_y{y}_t{t}"),
                        unit(mix(y, a) + delta + gaussian(&mut rng, d, config.description_noise)),
                    )
                    .with_class(y)
                    .with_attribute(a)
                    .with_template(format!("t{t}"))
                    .with_text(format!("scene {t}: a {class_name} with {attr_name}")),
                );
            }
        }
    }

    let attributes = (0..na)
        .map(|a| {
            let v = &spurious[a] + gaussian(&mut rng, d, config.attribute_noise);
            EmbeddingRecord::new(format!("attr_{a}"), unit(v))
                .with_attribute(a)
                .with_text(attribute_vocab[a].clone())
        })
        .collect();

    let sizes = config.resolved_group_sizes();
    let mut images = Vec::new();
    for y in 0..k {
        for a in 0..na {
            let count = sizes[&GroupLabel::new(a, y)];
            for _ in 0..count {
                let v = mix(y, a) + gaussian(&mut rng, d, config.noise_sigma);
                let id = format!("img_{:06}", images.len());
                images.push(EmbeddingRecord::new(id, unit(v)).with_class(y).with_attribute(a));
            }
        }
    }

    Ok(SynthBundle {
        images: set(SetKind::Image, images)?,
        class_prompts: set(SetKind::ClassPrompt, prompts)?,
        descriptions: set(SetKind::SceneDescription, descriptions)?,
        attributes: set(SetKind::Attribute, attributes)?,
        truth: SynthTruth {
            config: config.clone(),
            core_directions: core.iter().map(|v| v.data.as_vec().clone()).collect(),
            spurious_directions: spurious.iter().map(|v| v.data.as_vec().clone()).collect(),
        },
    })
}

/// Classifies each image by its inner product with the true core directions.
pub fn oracle_classify(bundle: &SynthBundle) -> Result<PredictionSet> {
    let core = &bundle.truth.core_directions;
    if core.len() < 2 || core.iter().any(|c| c.len() != bundle.images.dim()) {
        return Err(Error::invalid("bundle truth does not match the image set"));
    }
    let predictions = bundle
        .images
        .records()
        .iter()
        .map(|rec| {
            let scores: Vec<f64> = core
                .iter()
                .map(|c| c.iter().zip(&rec.vector).map(|(a, b)| a * b).sum())
                .collect();
            Prediction {
                id: rec.id.clone(),
                predicted_class: argmax(&scores),
                true_class: rec.class_label,
                attribute: rec.attribute_label,
                scores,
            }
        })
        .collect();
    Ok(PredictionSet {
        num_classes: core.len(),
        predictions,
    })
}

/// Writes the four embedding sets and `truth.json` into `dir`.
pub fn write_bundle(bundle: &SynthBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_embedding_set(&bundle.images, dir.join(IMAGES_FILE))?;
    save_embedding_set(&bundle.class_prompts, dir.join(PROMPTS_FILE))?;
    save_embedding_set(&bundle.descriptions, dir.join(DESCRIPTIONS_FILE))?;
    save_embedding_set(&bundle.attributes, dir.join(ATTRIBUTES_FILE))?;
    let path = dir.join(TRUTH_FILE);
    let mut json = serde_json::to_vec_pretty(&bundle.truth).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

/// Reads a bundle written by [`write_bundle`]. Vectors come back at `f32` precision.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<SynthBundle> {
    let dir = dir.as_ref();
    let path = dir.join(TRUTH_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let truth = serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })?;
    Ok(SynthBundle {
        images: load_embedding_set(dir.join(IMAGES_FILE))?,
        class_prompts: load_embedding_set(dir.join(PROMPTS_FILE))?,
        descriptions: load_embedding_set(dir.join(DESCRIPTIONS_FILE))?,
        attributes: load_embedding_set(dir.join(ATTRIBUTES_FILE))?,
        truth,
    })
}
