//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use prism::{EmbeddingRecord, EmbeddingSet, Pairing, SetKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit-norm scene descriptions, `per_group` per group, sharing templates `t0..`.
pub fn random_descriptions(
    rng: &mut ChaCha8Rng,
    dim: usize,
    k: usize,
    a: usize,
    per_group: usize,
) -> EmbeddingSet {
    let mut records = Vec::new();
    for attr in 0..a {
        for class in 0..k {
            for t in 0..per_group {
                records.push(
                    EmbeddingRecord::new(format!("d{attr}_{class}_{t}"), gaussian_unit(rng, dim))
                        .with_class(class)
                        .with_attribute(attr)
                        .with_template(format!("t{t}")),
                );
            }
        }
    }
    EmbeddingSet::new(
        SetKind::SceneDescription,
        dim,
        (0..k).map(|c| format!("c{c}")).collect(),
        (0..a).map(|x| format!("a{x}")).collect(),
        records,
    )
    .unwrap()
}

/// `I + sigma * N(0, 1)` entries.
pub fn random_projection(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| {
        let e: f64 = StandardNormal.sample(rng);
        f64::from(u8::from(i == j)) + sigma * e
    })
}

pub fn random_pairing(rng: &mut ChaCha8Rng) -> Pairing {
    [Pairing::TemplateMatched, Pairing::GroupMean, Pairing::AllPairs][rng.random_range(0..3)]
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    v / n
}

/// Representatives of group (a, y) as a list of unit vectors, by pairing mode.
/// For template_matched the list is indexed by template.
fn representatives(
    set: &EmbeddingSet,
    p: &DMatrix<f64>,
    pairing: Pairing,
    a: usize,
    y: usize,
) -> Vec<DVector<f64>> {
    let members: Vec<DVector<f64>> = set
        .records()
        .iter()
        .filter(|r| r.attribute_label == Some(a) && r.class_label == Some(y))
        .map(|r| unit(p * DVector::from_column_slice(&r.vector)))
        .collect();
    match pairing {
        Pairing::GroupMean => {
            let mut mean = DVector::zeros(set.dim());
            for m in &members {
                mean += m;
            }
            vec![unit(mean / members.len() as f64)]
        }
        _ => members,
    }
}

/// Literal transcription of the LD loss: ordered pairs of distinct groups, halved.
///
/// Returns `(intra, inter, hinge arguments cos - m for every inter pair)`.
/// Assumes the fixture layout from [`random_descriptions`] (template `t` is the
/// `t`-th member of every group).
pub fn naive_loss(
    set: &EmbeddingSet,
    p: &DMatrix<f64>,
    pairing: Pairing,
    margin: f64,
    k: usize,
    a_count: usize,
) -> (f64, f64, Vec<f64>) {
    let groups: Vec<(usize, usize)> = (0..a_count).flat_map(|a| (0..k).map(move |y| (a, y))).collect();
    let reps: Vec<Vec<DVector<f64>>> = groups
        .iter()
        .map(|&(a, y)| representatives(set, p, pairing, a, y))
        .collect();
    let (mut intra_sum, mut intra_n, mut inter_sum, mut inter_n) = (0.0, 0.0, 0.0, 0.0);
    let mut hinge_args = Vec::new();
    for (gi, &(a1, y1)) in groups.iter().enumerate() {
        for (gj, &(a2, y2)) in groups.iter().enumerate() {
            if gi == gj {
                continue;
            }
            let same_class = y1 == y2 && a1 != a2;
            let same_attr = a1 == a2 && y1 != y2;
            if !same_class && !same_attr {
                continue;
            }
            let pairs: Vec<(usize, usize)> = match pairing {
                Pairing::TemplateMatched => (0..reps[gi].len()).map(|t| (t, t)).collect(),
                _ => (0..reps[gi].len())
                    .flat_map(|s| (0..reps[gj].len()).map(move |t| (s, t)))
                    .collect(),
            };
            for (s, t) in pairs {
                let c = reps[gi][s].dot(&reps[gj][t]);
                if same_class {
                    intra_sum += 1.0 - c;
                    intra_n += 1.0;
                } else {
                    inter_sum += (c - margin).max(0.0);
                    inter_n += 1.0;
                    hinge_args.push(c - margin);
                }
            }
        }
    }
    // every unordered pair was visited twice
    (
        intra_sum / 2.0 / (intra_n / 2.0),
        inter_sum / 2.0 / (inter_n / 2.0),
        hinge_args,
    )
}

/// Orthogonal complement projector of the column span via SVD.
pub fn svd_complement(columns: &[Vec<f64>], dim: usize, rel_tol: f64) -> DMatrix<f64> {
    let normalized: Vec<DVector<f64>> = columns
        .iter()
        .map(|c| unit(DVector::from_column_slice(c)))
        .collect();
    let a = DMatrix::from_columns(&normalized);
    let svd = a.svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let mut p = DMatrix::identity(dim, dim);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_tol * smax {
            let ui = u.column(i);
            p -= ui * ui.transpose();
        }
    }
    p
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}
