//! Condition-keyed clustering dictionary.
//!
//! Keys are k-means centroids of the training-set condition embeddings; each
//! value is the mean latent of the items assigned to that centroid. A query
//! projects the condition and the keys through a shared affine map, takes a
//! softmax over their dot products, and returns the weighted mix of values.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::params::{init_weight, ModelParams};
use crate::netcore::tape::{Tape, Var};

const MAX_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDictionary {
    keys: Array2<f64>,
    values: Array2<f64>,
    tokens: usize,
    token_dim: usize,
    counts: Vec<usize>,
}

/// Diagnostics from dictionary construction.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansReport {
    pub iterations: usize,
    /// Sum of squared distances after each assignment pass.
    pub objective: Vec<f64>,
    pub reseeded: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(k, c)| (k, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn kmeans_plus_plus(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            // guard against round-off landing on an already chosen point
            if d2[chosen] == 0.0 {
                chosen = d2
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd's iterations with k-means++ seeding. Returns final assignments,
/// centroids and diagnostics. Empty clusters are re-seeded from the point
/// farthest from its current centroid.
fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> (Vec<usize>, Array2<f64>, KMeansReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut report = KMeansReport {
        iterations: 0,
        objective: Vec::new(),
        reseeded: 0,
    };
    let mut assign = vec![0usize; points.nrows()];
    loop {
        let mut objective = 0.0;
        let mut dists = vec![0.0; points.nrows()];
        for (i, p) in points.rows().into_iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assign[i] = c;
            dists[i] = d;
            objective += d;
        }
        report.objective.push(objective);

        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        let mut taken: HashSet<usize> = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = dists
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken.contains(i) && counts[assign[*i]] > 1)
                .fold((usize::MAX, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                .0;
            if far == usize::MAX {
                continue;
            }
            taken.insert(far);
            counts[assign[far]] -= 1;
            assign[far] = c;
            counts[c] = 1;
            dists[far] = 0.0;
            report.reseeded += 1;
        }

        let mut next = Array2::zeros(centroids.raw_dim());
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = next.row_mut(assign[i]);
            row += &p;
        }
        for (c, mut row) in next.rows_mut().into_iter().enumerate() {
            if counts[c] > 0 {
                row /= counts[c] as f64;
            } else {
                row.assign(&centroids.row(c));
            }
        }
        let shift = centroids
            .rows()
            .into_iter()
            .zip(next.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        report.iterations += 1;
        if shift < SHIFT_TOL || report.iterations >= MAX_ITERS {
            break;
        }
    }
    (assign, centroids, report)
}

fn to_matrix(rows: &[Vec<f64>], context: &'static str) -> Result<Array2<f64>> {
    let dim = rows.first().map(Vec::len).ok_or(Error::Empty(context))?;
    let mut m = Array2::zeros((rows.len(), dim));
    for (r, v) in rows.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Shape {
                context,
                expected: vec![dim],
                actual: vec![v.len()],
            });
        }
        m.row_mut(r).assign(&ArrayView1::from(v.as_slice()));
    }
    Ok(m)
}

/// Builds the dictionary from aligned condition embeddings and flattened
/// `tokens x token_dim` latents.
pub fn build_dictionary(
    embeddings: &[Vec<f64>],
    latents: &[Vec<f64>],
    k: usize,
    tokens: usize,
    seed: u64,
) -> Result<(ClusterDictionary, KMeansReport)> {
    if embeddings.len() != latents.len() {
        return Err(Error::Shape {
            context: "build_dictionary inputs",
            expected: vec![embeddings.len()],
            actual: vec![latents.len()],
        });
    }
    let points = to_matrix(embeddings, "condition embeddings")?;
    let lat = to_matrix(latents, "latents")?;
    if tokens == 0 || lat.ncols() % tokens != 0 {
        return Err(Error::InvalidArgument(format!(
            "latent size {} is not divisible into {tokens} tokens",
            lat.ncols()
        )));
    }
    let distinct: HashSet<Vec<u64>> = embeddings
        .iter()
        .map(|e| e.iter().map(|x| x.to_bits()).collect())
        .collect();
    if k == 0 || k > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} must lie in 1..={} (distinct embeddings)",
            distinct.len()
        )));
    }
    let (assign, _, report) = kmeans(&points, k, seed);

    let mut counts = vec![0usize; k];
    let mut keys = Array2::zeros((k, points.ncols()));
    let mut values = Array2::zeros((k, lat.ncols()));
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        let mut kr = keys.row_mut(c);
        kr += &points.row(i);
        let mut vr = values.row_mut(c);
        vr += &lat.row(i);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "cluster {empty} ended empty"
        )));
    }
    for (c, &n) in counts.iter().enumerate() {
        let inv = 1.0 / n as f64;
        keys.row_mut(c).mapv_inplace(|x| x * inv);
        values.row_mut(c).mapv_inplace(|x| x * inv);
    }
    Ok((
        ClusterDictionary {
            keys,
            values,
            tokens,
            token_dim: lat.ncols() / tokens,
            counts,
        },
        report,
    ))
}

impl ClusterDictionary {
    /// Direct construction from keys `[K x d_c]` and values `[K x n*d_m]`.
    pub fn from_parts(keys: Array2<f64>, values: Array2<f64>, tokens: usize) -> Result<Self> {
        if keys.nrows() != values.nrows() || keys.nrows() == 0 {
            return Err(Error::Shape {
                context: "dictionary parts",
                expected: vec![keys.nrows()],
                actual: vec![values.nrows()],
            });
        }
        if tokens == 0 || !values.ncols().is_multiple_of(tokens) {
            return Err(Error::InvalidArgument("value size not divisible by tokens".into()));
        }
        let k = keys.nrows();
        Ok(Self {
            token_dim: values.ncols() / tokens,
            keys,
            values,
            tokens,
            counts: vec![0; k],
        })
    }

    /// Rounds keys and values to `f32`, the checkpoint precision.
    pub fn snap_f32(&mut self) {
        self.keys.mapv_inplace(|x| x as f32 as f64);
        self.values.mapv_inplace(|x| x as f32 as f64);
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }

    pub fn keys(&self) -> &Array2<f64> {
        &self.keys
    }

    /// Values as `[K x (tokens * token_dim)]`.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn key_dim(&self) -> usize {
        self.keys.ncols()
    }

    pub fn value_dim(&self) -> usize {
        self.values.ncols()
    }

    /// Member counts per cluster (zero when built from parts).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push_array2("dict.keys", &self.keys);
        let data: Vec<f64> = self.values.iter().copied().collect();
        ckpt.push(
            "dict.values",
            vec![self.len(), self.tokens, self.token_dim],
            &data,
        );
        let counts: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        ckpt.push("dict.counts", vec![1, self.len()], &counts);
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let keys = ckpt
            .array2("dict.keys")
            .ok_or_else(|| Error::MissingParam("dict.keys".into()))?;
        let values = ckpt
            .array("dict.values")
            .ok_or_else(|| Error::MissingParam("dict.values".into()))?;
        let tokens = match values.shape.as_slice() {
            [_, n, _] => *n,
            _ => return Err(Error::Format("dict.values must be rank 3".into())),
        };
        let mut dict = Self::from_parts(keys, values.to_array2(), tokens)?;
        if let Some(c) = ckpt.array("dict.counts") {
            if c.data.len() != dict.len() {
                return Err(Error::Format("dict.counts length mismatch".into()));
            }
            dict.counts = c.data.iter().map(|&v| v as usize).collect();
        }
        Ok(dict)
    }
}

/// Initial query affine map `query.w [d_c x d_a]`, `query.b [1 x d_a]`.
pub fn init_query_affine(cond_dim: usize, query_dim: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    p.insert("query.w", init_weight(&mut rng, cond_dim, query_dim, 1.0));
    p.insert("query.b", Array2::zeros((1, query_dim)));
    p
}

/// Batched query on the tape: `queries [B x d_c] -> I [B x value_dim]`.
/// Also returns the similarity weights node `[B x K]`.
pub fn query_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    queries: Var,
    dict: &ClusterDictionary,
) -> Result<(Var, Var)> {
    if tape.value(queries).ncols() != dict.key_dim() {
        return Err(Error::Shape {
            context: "dictionary query",
            expected: vec![dict.key_dim()],
            actual: vec![tape.value(queries).ncols()],
        });
    }
    let w = tape.param(params, "query.w")?;
    let b = tape.param(params, "query.b")?;
    let aq = tape.affine(queries, w, b)?;
    let keys = tape.constant(dict.keys.clone());
    let ak = tape.affine(keys, w, b)?;
    let akt = tape.transpose(ak);
    let logits = tape.matmul(aq, akt)?;
    let rho = tape.softmax_rows(logits);
    let values = tape.constant(dict.values.clone());
    let rep = tape.matmul(rho, values)?;
    Ok((rep, rho))
}

/// Result of a single query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Softmax similarity weights over the `K` entries.
    pub weights: Array1<f64>,
    /// Clustering representation `[tokens x token_dim]`.
    pub representation: Array2<f64>,
}

/// Single query against the dictionary using the affine map in `affine`.
pub fn query(q: &[f64], dict: &ClusterDictionary, affine: &ModelParams) -> Result<QueryResult> {
    let mut tape = Tape::new();
    let qv = tape.constant(
        Array2::from_shape_vec((1, q.len()), q.to_vec()).expect("row vector"),
    );
    let (rep, rho) = query_on_tape(&mut tape, affine, qv, dict)?;
    let representation = tape
        .value(rep)
        .clone()
        .into_shape_with_order((dict.tokens, dict.token_dim))
        .expect("value layout");
    Ok(QueryResult {
        weights: tape.value(rho).index_axis(Axis(0), 0).to_owned(),
        representation,
    })
}

/// `block_input + I W + b`.
pub fn fuse(tape: &mut Tape, block_input: Var, reference: Var, w: Var, b: Var) -> Result<Var> {
    let mapped = tape.affine(reference, w, b)?;
    tape.add(block_input, mapped)
}

/// Untaped [`fuse`].
pub fn fuse_arrays(
    block_input: &Array2<f64>,
    reference: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(block_input.clone());
    let i = tape.constant(reference.clone());
    let w = tape.constant(w.clone());
    let b = tape.constant(b.clone());
    let out = fuse(&mut tape, x, i, w, b)?;
    Ok(tape.value(out).clone())
}
