//! Summary-feature metrics for generated motion.
//!
//! All metrics work on per-sequence summary features rather than a learned
//! evaluator: per-channel mean, standard deviation and mean absolute value.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to both covariances when either is numerically singular.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Pair budget for diversity estimates on large sets.
pub const DIVERSITY_PAIRS: usize = 10_000;

/// `[mean_j..., std_j..., mean|x|_j...]` for an `F x J` sequence.
pub fn summary_features(data: &Array2<f64>) -> Vec<f64> {
    let f = data.nrows().max(1) as f64;
    let mut mean = Vec::with_capacity(data.ncols());
    let mut std = Vec::with_capacity(data.ncols());
    let mut abs = Vec::with_capacity(data.ncols());
    for col in data.columns() {
        let m = col.sum() / f;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / f;
        mean.push(m);
        std.push(var.sqrt());
        abs.push(col.iter().map(|x| x.abs()).sum::<f64>() / f);
    }
    mean.extend(std);
    mean.extend(abs);
    mean
}

fn check_rows(set: &[Vec<f64>], context: &'static str) -> Result<usize> {
    let dim = set.first().map(Vec::len).ok_or(Error::Empty(context))?;
    if let Some(bad) = set.iter().find(|v| v.len() != dim) {
        return Err(Error::Shape {
            context,
            expected: vec![dim],
            actual: vec![bad.len()],
        });
    }
    Ok(dim)
}

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mu;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn is_degenerate(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &l| m.min(l));
    min <= 1e-12 * max.max(1e-300)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetDistance {
    pub value: f64,
    /// True when the covariance ridge had to be added.
    pub ridge_applied: bool,
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_gaussian_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetDistance> {
    let dim = check_rows(a, "frechet set A")?;
    if check_rows(b, "frechet set B")? != dim {
        return Err(Error::Shape {
            context: "frechet feature dimension",
            expected: vec![dim],
            actual: vec![b[0].len()],
        });
    }
    for (set, name) in [(a, "A"), (b, "B")] {
        if set.len() < dim + 1 {
            return Err(Error::InvalidArgument(format!(
                "frechet set {name} needs at least {} items, got {}",
                dim + 1,
                set.len()
            )));
        }
    }
    let (mu_a, mut cov_a) = moments(a, dim);
    let (mu_b, mut cov_b) = moments(b, dim);
    let ridge_applied = is_degenerate(&cov_a) || is_degenerate(&cov_b);
    if ridge_applied {
        for i in 0..dim {
            cov_a[(i, i)] += COVARIANCE_RIDGE;
            cov_b[(i, i)] += COVARIANCE_RIDGE;
        }
    }
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum::<f64>();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(FrechetDistance {
        value: value.max(0.0),
        ridge_applied,
    })
}

/// Per-class feature centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    centers: BTreeMap<u16, Vec<f64>>,
}

impl Centroids {
    pub fn fit(features: &[Vec<f64>], labels: &[u16]) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape {
                context: "centroid inputs",
                expected: vec![features.len()],
                actual: vec![labels.len()],
            });
        }
        let dim = check_rows(features, "centroid features")?;
        let mut sums: BTreeMap<u16, (Vec<f64>, usize)> = BTreeMap::new();
        for (f, &l) in features.iter().zip(labels) {
            let e = sums.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, x) in e.0.iter_mut().zip(f) {
                *s += x;
            }
            e.1 += 1;
        }
        let centers = sums
            .into_iter()
            .map(|(l, (s, n))| (l, s.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        Ok(Self { centers })
    }

    pub fn labels(&self) -> Vec<u16> {
        self.centers.keys().copied().collect()
    }

    pub fn center(&self, label: u16) -> Option<&[f64]> {
        self.centers.get(&label).map(Vec::as_slice)
    }

    /// Label of the nearest centroid; ties go to the smaller label.
    pub fn classify(&self, feature: &[f64]) -> u16 {
        let mut best = (u16::MAX, f64::INFINITY);
        for (&l, c) in &self.centers {
            let d: f64 = c.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (l, d);
            }
        }
        best.0
    }
}

/// Fraction of `(label, feature)` samples whose nearest centroid is their label.
pub fn condition_accuracy(samples: &[(u16, Vec<f64>)], centroids: &Centroids) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("condition accuracy samples"));
    }
    let mut hits = 0usize;
    for (label, f) in samples {
        if centroids.center(*label).is_none() {
            return Err(Error::UnknownLabel(*label));
        }
        if centroids.classify(f) == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over ordered pairs (self pairs included).
///
/// Sets with at most `DIVERSITY_PAIRS` ordered pairs are evaluated exactly;
/// larger sets use that many seeded random pairs drawn after sorting the
/// input, so the result does not depend on input order.
pub fn diversity(samples: &[Vec<f64>], seed: u64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    check_rows(samples, "diversity samples")?;
    let n = samples.len();
    if n * n <= DIVERSITY_PAIRS {
        let total: f64 = samples
            .iter()
            .map(|a| samples.iter().map(|b| dist(a, b)).sum::<f64>())
            .sum();
        return Ok(total / (n * n) as f64);
    }
    let mut sorted: Vec<&Vec<f64>> = samples.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..DIVERSITY_PAIRS)
        .map(|_| dist(sorted[rng.gen_range(0..n)], sorted[rng.gen_range(0..n)]))
        .sum();
    Ok(total / DIVERSITY_PAIRS as f64)
}

/// Within-condition diversity averaged over conditions.
pub fn multimodality(groups: &[Vec<Vec<f64>>], seed: u64) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Empty("multimodality groups"));
    }
    let mut total = 0.0;
    for (k, g) in groups.iter().enumerate() {
        total += diversity(g, seed.wrapping_add(k as u64))?;
    }
    Ok(total / groups.len() as f64)
}

/// One metric line: `{"metric", "value", "nfe", "seed", "config_hash"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub nfe: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Format(format!("metric record: {e}")))
    }
}
