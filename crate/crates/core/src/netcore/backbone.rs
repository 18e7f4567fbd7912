//! Dense residual backbone with long skip connections.
//!
//! Every block sees `h + time_emb + cond_emb (+ fuse(I))` as its input and adds
//! a two-layer residual branch. Blocks in the second half additionally merge
//! the output of their mirror block in the first half through a learned linear
//! map, giving the U-shaped skip pattern.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering;
use crate::error::{Error, Result};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::params::{init_weight, ModelParams};
use crate::netcore::tape::{Tape, Var};
use crate::schedule::skip_coeffs;

/// Condition fed to the network: a text-embedding stand-in or the learned
/// null embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionEmbedding {
    Text(Vec<f64>),
    Null,
}

impl ConditionEmbedding {
    pub fn is_null(&self) -> bool {
        matches!(self, Self::Null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Flattened latent size `n * d`.
    pub latent_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Flattened clustering-representation size; `None` builds no fusion maps.
    pub cluster_dim: Option<usize>,
    /// Width of the query/key affine projection used by the dictionary lookup.
    pub query_dim: usize,
}

impl BackboneConfig {
    pub fn new(latent_dim: usize, width: usize, blocks: usize, cond_dim: usize) -> Self {
        Self {
            latent_dim,
            width,
            blocks,
            time_dim: 64,
            cond_dim,
            cluster_dim: None,
            query_dim: 64,
        }
    }

    pub fn with_clustering(mut self, cluster_dim: usize) -> Self {
        self.cluster_dim = Some(cluster_dim);
        self
    }

    pub fn write_meta(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(format!("{prefix}latent_dim"), self.latent_dim.to_string());
        ckpt.set_meta(format!("{prefix}width"), self.width.to_string());
        ckpt.set_meta(format!("{prefix}blocks"), self.blocks.to_string());
        ckpt.set_meta(format!("{prefix}time_dim"), self.time_dim.to_string());
        ckpt.set_meta(format!("{prefix}cond_dim"), self.cond_dim.to_string());
        ckpt.set_meta(
            format!("{prefix}cluster_dim"),
            self.cluster_dim.map_or("none".to_string(), |c| c.to_string()),
        );
        ckpt.set_meta(format!("{prefix}query_dim"), self.query_dim.to_string());
    }

    pub fn read_meta(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            let full = format!("{prefix}{key}");
            ckpt.meta(&full)
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{full}`")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for `{prefix}{key}`")))
        };
        let cluster_dim = match get("cluster_dim")?.as_str() {
            "none" => None,
            _ => Some(num("cluster_dim")?),
        };
        Ok(Self {
            latent_dim: num("latent_dim")?,
            width: num("width")?,
            blocks: num("blocks")?,
            time_dim: num("time_dim")?,
            cond_dim: num("cond_dim")?,
            cluster_dim,
            query_dim: num("query_dim")?,
        })
    }

    fn skip_blocks(&self) -> impl Iterator<Item = usize> {
        let half = self.blocks / 2;
        (self.blocks - half)..self.blocks
    }
}

/// Sinusoidal features of `1000 t`, `[sin | cos]` halves.
pub fn time_features(times: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((times.len(), dim), |(r, c)| {
        let k = c % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = 1000.0 * times[r] * freq;
        if c < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

pub fn init_params(config: &BackboneConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let BackboneConfig {
        latent_dim: d,
        width: h,
        blocks,
        time_dim,
        cond_dim,
        ..
    } = *config;
    let zeros = |r: usize, c: usize| Array2::<f64>::zeros((r, c));
    let branch_gain = 1.0 / (blocks.max(1) as f64).sqrt();
    let mut p = ModelParams::new();
    p.insert("in.w", init_weight(&mut rng, d, h, 1.0));
    p.insert("in.b", zeros(1, h));
    p.insert("time.w1", init_weight(&mut rng, time_dim, h, 1.0));
    p.insert("time.b1", zeros(1, h));
    p.insert("time.w2", init_weight(&mut rng, h, h, 1.0));
    p.insert("time.b2", zeros(1, h));
    p.insert("cond.w", init_weight(&mut rng, cond_dim, h, 1.0));
    p.insert("cond.b", zeros(1, h));
    p.insert("cond.null", zeros(1, cond_dim));
    for i in 0..blocks {
        p.insert(format!("block{i}.w1"), init_weight(&mut rng, h, h, 1.0));
        p.insert(format!("block{i}.b1"), zeros(1, h));
        p.insert(format!("block{i}.w2"), init_weight(&mut rng, h, h, branch_gain));
        p.insert(format!("block{i}.b2"), zeros(1, h));
    }
    for i in config.skip_blocks() {
        p.insert(format!("skip{i}.w"), init_weight(&mut rng, h, h, 0.5));
        p.insert(format!("skip{i}.b"), zeros(1, h));
    }
    if let Some(v) = config.cluster_dim {
        p.insert("query.w", init_weight(&mut rng, cond_dim, config.query_dim, 1.0));
        p.insert("query.b", zeros(1, config.query_dim));
        for i in 0..blocks {
            p.insert(format!("fuse{i}.w"), zeros(v, h));
            p.insert(format!("fuse{i}.b"), zeros(1, h));
        }
    }
    p.insert("out.w", zeros(h, d));
    p.insert("out.b", zeros(1, d));
    p
}

/// Condition rows on the tape: `[batch x cond_dim]`.
pub fn condition_rows(
    tape: &mut Tape,
    params: &ModelParams,
    conds: &[ConditionEmbedding],
    cond_dim: usize,
) -> Result<Var> {
    let batch = conds.len();
    if batch == 0 {
        return Err(Error::Empty("condition batch"));
    }
    let mut text = Array2::zeros((batch, cond_dim));
    let mut null_mask = Array2::zeros((batch, cond_dim));
    for (r, c) in conds.iter().enumerate() {
        match c {
            ConditionEmbedding::Text(v) => {
                if v.len() != cond_dim {
                    return Err(Error::Shape {
                        context: "condition embedding",
                        expected: vec![cond_dim],
                        actual: vec![v.len()],
                    });
                }
                text.row_mut(r).assign(&ndarray::ArrayView1::from(v.as_slice()));
            }
            ConditionEmbedding::Null => null_mask.row_mut(r).fill(1.0),
        }
    }
    let nulls = conds.iter().filter(|c| c.is_null()).count();
    if nulls == 0 {
        return Ok(tape.constant(text));
    }
    let null = tape.param(params, "cond.null")?;
    let repeated = tape.repeat_segments(null, vec![batch])?;
    if nulls == batch {
        return Ok(repeated);
    }
    let mask = tape.constant(null_mask);
    let masked = tape.mul(repeated, mask)?;
    let text = tape.constant(text);
    tape.add(text, masked)
}

fn affine_named(tape: &mut Tape, params: &ModelParams, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    tape.affine(x, w, b)
}

/// Raw network output `[batch x latent_dim]` recorded on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &BackboneConfig,
    x: Var,
    times: &[f64],
    conds: &[ConditionEmbedding],
    cluster_ref: Option<Var>,
) -> Result<Var> {
    let batch = tape.value(x).nrows();
    if tape.value(x).ncols() != config.latent_dim || times.len() != batch || conds.len() != batch
    {
        return Err(Error::Shape {
            context: "backbone input",
            expected: vec![batch, config.latent_dim],
            actual: vec![times.len(), tape.value(x).ncols(), conds.len()],
        });
    }
    if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain { t, domain: "[0, 1]" });
    }
    if let Some(i) = cluster_ref {
        let expected = config.cluster_dim.unwrap_or(0);
        if tape.value(i).ncols() != expected || tape.value(i).nrows() != batch {
            return Err(Error::Shape {
                context: "cluster reference",
                expected: vec![batch, expected],
                actual: tape.value(i).shape().to_vec(),
            });
        }
    }

    let tf = tape.constant(time_features(times, config.time_dim));
    let w1 = tape.param(params, "time.w1")?;
    let b1 = tape.param(params, "time.b1")?;
    let t1 = tape.affine(tf, w1, b1)?;
    let t1 = tape.silu(t1);
    let w2 = tape.param(params, "time.w2")?;
    let b2 = tape.param(params, "time.b2")?;
    let temb = tape.affine(t1, w2, b2)?;
    let c = condition_rows(tape, params, conds, config.cond_dim)?;
    let cemb = affine_named(tape, params, c, "cond")?;
    let emb = tape.add(temb, cemb)?;

    let mut h = affine_named(tape, params, x, "in")?;
    let half = config.blocks / 2;
    let mut stack = Vec::with_capacity(half);
    for i in 0..config.blocks {
        if i >= config.blocks - half {
            let skip = stack.pop().expect("mirror block output");
            let merged = affine_named(tape, params, skip, &format!("skip{i}"))?;
            h = tape.add(h, merged)?;
        }
        let mut block_in = tape.add(h, emb)?;
        if let Some(reference) = cluster_ref {
            let w = tape.param(params, &format!("fuse{i}.w"))?;
            let b = tape.param(params, &format!("fuse{i}.b"))?;
            block_in = clustering::fuse(tape, block_in, reference, w, b)?;
        }
        let a = tape.silu(block_in);
        let w = tape.param(params, &format!("block{i}.w1"))?;
        let b = tape.param(params, &format!("block{i}.b1"))?;
        let a = tape.affine(a, w, b)?;
        let a = tape.silu(a);
        let w = tape.param(params, &format!("block{i}.w2"))?;
        let b = tape.param(params, &format!("block{i}.b2"))?;
        let r = tape.affine(a, w, b)?;
        h = tape.add(h, r)?;
        if i < half {
            stack.push(h);
        }
    }
    let a = tape.silu(h);
    affine_named(tape, params, a, "out")
}

/// `c_skip(t) x + c_out(t) raw`, the boundary-preserving consistency output.
pub fn skip_combine(tape: &mut Tape, x: Var, raw: Var, times: &[f64], eta: f64) -> Result<Var> {
    let (skip, out): (Vec<f64>, Vec<f64>) = times
        .iter()
        .map(|&t| {
            let c = skip_coeffs(t, eta);
            (c.c_skip, c.c_out)
        })
        .unzip();
    let a = tape.scale_rows(x, skip)?;
    let b = tape.scale_rows(raw, out)?;
    tape.add(a, b)
}

/// Consistency-model output recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &BackboneConfig,
    x: Var,
    times: &[f64],
    conds: &[ConditionEmbedding],
    cluster_ref: Option<Var>,
    eta: f64,
) -> Result<Var> {
    let raw = forward(tape, params, config, x, times, conds, cluster_ref)?;
    skip_combine(tape, x, raw, times, eta)
}

/// Untaped convenience: raw output plus the record that produced it.
pub fn backbone_forward(
    params: &ModelParams,
    config: &BackboneConfig,
    x_t: &Array2<f64>,
    times: &[f64],
    conds: &[ConditionEmbedding],
    cluster_ref: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, Tape)> {
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let i = cluster_ref.map(|c| tape.constant(c.clone()));
    let raw = forward(&mut tape, params, config, x, times, conds, i)?;
    Ok((tape.value(raw).clone(), tape))
}

/// Untaped consistency output `S(x_t, t, c)`.
pub fn consistency_apply(
    params: &ModelParams,
    config: &BackboneConfig,
    x_t: &Array2<f64>,
    times: &[f64],
    conds: &[ConditionEmbedding],
    cluster_ref: Option<&Array2<f64>>,
    eta: f64,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let i = cluster_ref.map(|c| tape.constant(c.clone()));
    let out = consistency_forward(&mut tape, params, config, x, times, conds, i, eta)?;
    Ok(tape.value(out).clone())
}
