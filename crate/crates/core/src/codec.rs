//! Variable-length motion autoencoder with a bounded, quantized latent.
//!
//! The encoder maps every frame `[x_f, pos(f), x_f (x) pos(f)]` through a
//! small MLP, averages over frames and projects to `tokens x token_dim`. The
//! decoder sums a latent-weighted Fourier basis and an MLP of the latent and
//! `pos(f)` for each output frame.

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::MotionSequence;
use crate::error::{Error, Result};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::optim::{AdamW, AdamWConfig};
use crate::netcore::params::{init_weight, ModelParams};
use crate::netcore::tape::{cumsum_rows, smooth_l1, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// `round(l * tanh(z_e)) / l`.
    Quantized,
    /// Continuous `z_e`, unbounded (ablation).
    Raw,
}

impl LatentMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Quantized => "quantized",
            Self::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quantized" => Ok(Self::Quantized),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown latent mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LatentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub channels: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub width: usize,
    pub pos_dim: usize,
    pub level: u32,
    pub lambda_j: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub mode: LatentMode,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            tokens: 4,
            token_dim: 16,
            width: 128,
            pos_dim: 16,
            level: 256,
            lambda_j: 1e-3,
            frames_min: 32,
            frames_max: 64,
            mode: LatentMode::Quantized,
        }
    }
}

impl CodecConfig {
    pub fn latent_dim(&self) -> usize {
        self.tokens * self.token_dim
    }
}

/// Fourier features of absolute frame indices: `[sin | cos]` at `k / 64`
/// cycles per frame for `k = 1..=dim/2`.
pub fn frame_features(frames: usize, dim: usize) -> Array2<f64> {
    let half = (dim / 2).max(1);
    Array2::from_shape_fn((frames, dim), |(f, c)| {
        let k = (c % half + 1) as f64;
        let arg = std::f64::consts::TAU * k * f as f64 / 64.0;
        if c < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// `round(l * tanh(z_e)) / l` element-wise.
pub fn quantize(z_e: &Array2<f64>, level: u32) -> Result<Array2<f64>> {
    if level == 0 {
        return Err(Error::InvalidArgument("quantization level must be >= 1".into()));
    }
    let l = level as f64;
    Ok(z_e.mapv(|z| (l * z.tanh()).round() / l))
}

/// Velocities to positions: running sum down the frame axis.
pub fn joint_transform(x: &Array2<f64>) -> Array2<f64> {
    cumsum_rows(x, &[x.nrows()])
}

/// `smoothL1(x, x_hat) + lambda_j * smoothL1(J(x), J(x_hat))`, element means.
pub fn recon_loss(x: &Array2<f64>, x_hat: &Array2<f64>, lambda_j: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            context: "recon_loss",
            expected: x.shape().to_vec(),
            actual: x_hat.shape().to_vec(),
        });
    }
    let mean_sl1 = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(p, q)| smooth_l1(p - q)).sum::<f64>() / a.len() as f64
    };
    let base = mean_sl1(x, x_hat);
    if lambda_j == 0.0 {
        return Ok(base);
    }
    Ok(base + lambda_j * mean_sl1(&joint_transform(x), &joint_transform(x_hat)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ModelParams,
}

fn affine(tape: &mut Tape, p: &ModelParams, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = tape.param(p, w)?;
    let b = tape.param(p, b)?;
    tape.affine(x, w, b)
}

impl Codec {
    pub fn init(config: CodecConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let CodecConfig {
            channels: j,
            width: h,
            pos_dim: p,
            ..
        } = config;
        let z = config.latent_dim();
        let zeros = |c: usize| Array2::<f64>::zeros((1, c));
        let mut params = ModelParams::new();
        params.insert("enc.w1", init_weight(&mut rng, j + p + j * p, h, 1.0));
        params.insert("enc.b1", zeros(h));
        params.insert("enc.w2", init_weight(&mut rng, h, h, 1.0));
        params.insert("enc.b2", zeros(h));
        params.insert("enc.w3", init_weight(&mut rng, h, z, 1.0));
        params.insert("enc.b3", zeros(z));
        params.insert("dec.wz", init_weight(&mut rng, z, h, 1.0));
        params.insert("dec.wp", init_weight(&mut rng, p, h, 1.0));
        params.insert("dec.b1", zeros(h));
        params.insert("dec.w2", init_weight(&mut rng, h, h, 1.0));
        params.insert("dec.b2", zeros(h));
        params.insert("dec.w3", init_weight(&mut rng, h, j, 1.0));
        params.insert("dec.b3", zeros(j));
        params.insert("dec.wc", init_weight(&mut rng, z, p * j, 1.0));
        params.insert("dec.bc", zeros(p * j));
        Self { config, params }
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if frames < self.config.frames_min || frames > self.config.frames_max {
            return Err(Error::InvalidArgument(format!(
                "frame count {frames} outside {}..={}",
                self.config.frames_min, self.config.frames_max
            )));
        }
        Ok(())
    }

    fn stack_inputs(&self, seqs: &[&Array2<f64>]) -> Result<(Array2<f64>, Vec<usize>)> {
        if seqs.is_empty() {
            return Err(Error::Empty("encoder batch"));
        }
        let j = self.config.channels;
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut blocks = Vec::with_capacity(seqs.len());
        for x in seqs {
            if x.nrows() == 0 {
                return Err(Error::Empty("motion sequence"));
            }
            if x.ncols() != j {
                return Err(Error::Shape {
                    context: "encoder input channels",
                    expected: vec![j],
                    actual: vec![x.ncols()],
                });
            }
            let pos = frame_features(x.nrows(), self.config.pos_dim);
            let p = self.config.pos_dim;
            let outer = Array2::from_shape_fn((x.nrows(), j * p), |(f, c)| x[[f, c / p]] * pos[[f, c % p]]);
            blocks.push(
                ndarray::concatenate(Axis(1), &[x.view(), pos.view(), outer.view()])
                    .expect("rows match"),
            );
            lengths.push(x.nrows());
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok((ndarray::concatenate(Axis(0), &views).expect("cols match"), lengths))
    }

    /// Pre-activation latents `[batch x n*d]` recorded on `tape`.
    pub fn encode_on_tape(&self, tape: &mut Tape, seqs: &[&Array2<f64>]) -> Result<Var> {
        let (input, lengths) = self.stack_inputs(seqs)?;
        let x = tape.constant(input);
        let h = affine(tape, &self.params, x, "enc.w1", "enc.b1")?;
        let h = tape.silu(h);
        let h = affine(tape, &self.params, h, "enc.w2", "enc.b2")?;
        let h = tape.silu(h);
        let pooled = tape.segment_mean(h, lengths)?;
        affine(tape, &self.params, pooled, "enc.w3", "enc.b3")
    }

    /// Applies the latent constraint on the tape.
    pub fn constrain_on_tape(&self, tape: &mut Tape, z_e: Var, mode: LatentMode) -> Var {
        match mode {
            LatentMode::Quantized => {
                let b = tape.tanh(z_e);
                tape.ste_round(b, self.config.level)
            }
            LatentMode::Raw => z_e,
        }
    }

    /// Decoded frames `[sum(frames) x J]` for latents `[batch x n*d]`.
    pub fn decode_on_tape(&self, tape: &mut Tape, z: Var, frames: &[usize]) -> Result<Var> {
        if tape.value(z).nrows() != frames.len() || tape.value(z).ncols() != self.config.latent_dim() {
            return Err(Error::Shape {
                context: "decoder latent",
                expected: vec![frames.len(), self.config.latent_dim()],
                actual: tape.value(z).shape().to_vec(),
            });
        }
        for &f in frames {
            self.check_frames(f)?;
        }
        let (p, j) = (self.config.pos_dim, self.config.channels);
        let pos_blocks: Vec<Array2<f64>> = frames
            .iter()
            .map(|&f| frame_features(f, p))
            .collect();
        let views: Vec<_> = pos_blocks.iter().map(|b| b.view()).collect();
        let pos_all = ndarray::concatenate(Axis(0), &views).expect("cols match");
        let basis = Array2::from_shape_fn((pos_all.nrows(), p * j), |(r, c)| pos_all[[r, c / j]]);
        let summer = Array2::from_shape_fn((p * j, j), |(c, o)| if c % j == o { 1.0 } else { 0.0 });
        let pos = tape.constant(pos_all);

        // per-sequence Fourier coefficients
        let coef = affine(tape, &self.params, z, "dec.wc", "dec.bc")?;
        let coef = tape.repeat_segments(coef, frames.to_vec())?;
        let basis = tape.constant(basis);
        let wave = tape.mul(coef, basis)?;
        let summer = tape.constant(summer);
        let wave = tape.matmul(wave, summer)?;

        let wz = tape.param(&self.params, "dec.wz")?;
        let zw = tape.matmul(z, wz)?;
        let zw = tape.repeat_segments(zw, frames.to_vec())?;
        let h = affine(tape, &self.params, pos, "dec.wp", "dec.b1")?;
        let h = tape.add(h, zw)?;
        let h = tape.silu(h);
        let h = affine(tape, &self.params, h, "dec.w2", "dec.b2")?;
        let h = tape.silu(h);
        let mlp = affine(tape, &self.params, h, "dec.w3", "dec.b3")?;
        tape.add(mlp, wave)
    }

    /// Continuous pre-activation latent `z_e` as `tokens x token_dim`.
    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let z = self.encode_on_tape(&mut tape, &[x])?;
        Ok(tape
            .value(z)
            .clone()
            .into_shape_with_order((self.config.tokens, self.config.token_dim))
            .expect("latent layout"))
    }

    /// Latents used downstream, one flattened row per sequence, in the
    /// codec's configured mode.
    pub fn latents(&self, seqs: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let z = self.encode_on_tape(&mut tape, seqs)?;
        let z = self.constrain_on_tape(&mut tape, z, self.config.mode);
        Ok(tape.value(z).clone())
    }

    /// Decodes one latent (any shape with `n*d` entries) to `frames x J`.
    pub fn decode(&self, z: &Array2<f64>, frames: usize) -> Result<Array2<f64>> {
        if z.len() != self.config.latent_dim() {
            return Err(Error::Shape {
                context: "decoder latent",
                expected: vec![self.config.tokens, self.config.token_dim],
                actual: z.shape().to_vec(),
            });
        }
        let flat = Array2::from_shape_vec((1, z.len()), z.iter().copied().collect())
            .expect("row vector");
        self.decode_batch(&flat, &[frames]).map(|mut v| v.remove(0))
    }

    /// Decodes latent rows `[batch x n*d]`.
    pub fn decode_batch(&self, z: &Array2<f64>, frames: &[usize]) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode_on_tape(&mut tape, zv, frames)?;
        let out = tape.value(out);
        let mut res = Vec::with_capacity(frames.len());
        let mut lo = 0;
        for &f in frames {
            res.push(out.slice(s![lo..lo + f, ..]).to_owned());
            lo += f;
        }
        Ok(res)
    }

    /// Encode, constrain per `mode`, decode; returns the reconstruction.
    pub fn reconstruct(&self, x: &Array2<f64>, mode: Option<LatentMode>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let z = self.encode_on_tape(&mut tape, &[x])?;
        let z = match mode {
            Some(m) => self.constrain_on_tape(&mut tape, z, m),
            None => tape.tanh(z),
        };
        let out = self.decode_on_tape(&mut tape, z, &[x.nrows()])?;
        Ok(tape.value(out).clone())
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        let c = &self.config;
        ckpt.set_meta("codec.channels", c.channels.to_string());
        ckpt.set_meta("codec.tokens", c.tokens.to_string());
        ckpt.set_meta("codec.token_dim", c.token_dim.to_string());
        ckpt.set_meta("codec.width", c.width.to_string());
        ckpt.set_meta("codec.pos_dim", c.pos_dim.to_string());
        ckpt.set_meta("codec.level", c.level.to_string());
        ckpt.set_meta("codec.lambda_j", format!("{:e}", c.lambda_j));
        ckpt.set_meta("codec.frames_min", c.frames_min.to_string());
        ckpt.set_meta("codec.frames_max", c.frames_max.to_string());
        ckpt.set_meta("codec.mode", c.mode.name());
        ckpt.push_params("codec.", &self.params);
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        fn get<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
            ckpt.meta(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for `{key}`")))
        }
        let config = CodecConfig {
            channels: get(ckpt, "codec.channels")?,
            tokens: get(ckpt, "codec.tokens")?,
            token_dim: get(ckpt, "codec.token_dim")?,
            width: get(ckpt, "codec.width")?,
            pos_dim: get(ckpt, "codec.pos_dim")?,
            level: get(ckpt, "codec.level")?,
            lambda_j: get(ckpt, "codec.lambda_j")?,
            frames_min: get(ckpt, "codec.frames_min")?,
            frames_max: get(ckpt, "codec.frames_max")?,
            mode: LatentMode::parse(ckpt.meta("codec.mode").unwrap_or_default())?,
        };
        let params = ckpt.params("codec.");
        let reference = Codec::init(config, 0);
        reference.params.check_layout(&params, "codec checkpoint")?;
        Ok(Self { config, params })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Resumable codec training state.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecTrainer {
    pub codec: Codec,
    pub config: CodecTrainConfig,
    opt: AdamW,
    step: u64,
}

impl CodecTrainer {
    pub fn new(codec: Codec, config: CodecTrainConfig) -> Self {
        let opt = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                ..AdamWConfig::default()
            },
            &codec.params,
        );
        Self {
            codec,
            config,
            opt,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Batch loss at the current parameters for the batch the next step would draw.
    pub fn batch_loss(&self, items: &[MotionSequence]) -> Result<f64> {
        let (tape, loss) = self.loss_tape(items)?;
        Ok(tape.scalar(loss))
    }

    fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        (0..self.config.batch.min(n.max(1)))
            .map(|_| rng.gen_range(0..n))
            .collect()
    }

    fn loss_tape(&self, items: &[MotionSequence]) -> Result<(Tape, Var)> {
        if items.is_empty() {
            return Err(Error::Empty("codec training corpus"));
        }
        let idx = self.batch_indices(items.len());
        let seqs: Vec<&Array2<f64>> = idx.iter().map(|&i| &items[i].data).collect();
        let frames: Vec<usize> = seqs.iter().map(|x| x.nrows()).collect();
        let codec = &self.codec;
        let mut tape = Tape::new();
        let z = codec.encode_on_tape(&mut tape, &seqs)?;
        let z = codec.constrain_on_tape(&mut tape, z, codec.config.mode);
        let out = codec.decode_on_tape(&mut tape, z, &frames)?;
        let views: Vec<_> = seqs.iter().map(|x| x.view()).collect();
        let target = ndarray::concatenate(Axis(0), &views).expect("cols match");
        let tv = tape.constant(target);
        let mut loss = tape.smooth_l1_mean(out, tv)?;
        if codec.config.lambda_j != 0.0 {
            let jo = tape.cumsum_segments(out, frames.clone())?;
            let jt = tape.cumsum_segments(tv, frames)?;
            let jl = tape.smooth_l1_mean(jo, jt)?;
            let jl = tape.scale(jl, codec.config.lambda_j);
            loss = tape.add(loss, jl)?;
        }
        Ok((tape, loss))
    }

    /// One AdamW step; returns the batch loss before the update.
    pub fn step(&mut self, items: &[MotionSequence]) -> Result<f64> {
        let (tape, loss) = self.loss_tape(items)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("codec loss {value}"),
            });
        }
        let grads = tape.gradients(loss, &self.codec.params)?;
        self.opt
            .step(&mut self.codec.params, &grads)
            .map_err(|e| Error::Diverged {
                step: self.step,
                detail: e.to_string(),
            })?;
        self.step += 1;
        Ok(value)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.codec.write_into(&mut c);
        c.set_meta("train.steps", self.config.steps.to_string());
        c.set_meta("train.batch", self.config.batch.to_string());
        c.set_meta("train.lr", format!("{:e}", self.config.lr));
        c.set_meta("train.seed", self.config.seed.to_string());
        for (name, arr) in self.opt.state_arrays(&self.codec.params) {
            c.push_array2(format!("codec.{name}"), &arr);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: CodecTrainConfig) -> Result<Self> {
        let codec = Codec::read_from(&Checkpoint {
            meta: ckpt.meta.clone(),
            arrays: ckpt
                .arrays
                .iter()
                .filter(|a| !a.name.starts_with("codec.opt."))
                .cloned()
                .collect(),
        })?;
        let opt = AdamW::from_state(
            AdamWConfig {
                lr: config.lr,
                ..AdamWConfig::default()
            },
            &codec.params,
            |k| ckpt.array2(&format!("codec.{k}")),
        )?;
        let step = opt.steps_taken();
        Ok(Self {
            codec,
            config,
            opt,
            step,
        })
    }
}

/// Trains a codec for `train.steps` steps; returns it with the per-step losses.
pub fn train_codec(
    items: &[MotionSequence],
    config: CodecConfig,
    train: CodecTrainConfig,
) -> Result<(Codec, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Empty("codec training corpus"));
    }
    let mut trainer = CodecTrainer::new(Codec::init(config, train.seed), train);
    let mut losses = Vec::with_capacity(train.steps);
    for _ in 0..train.steps {
        losses.push(trainer.step(items)?);
    }
    Ok((trainer.codec, losses))
}

/// Mean loss over consecutive windows of `window` steps.
pub fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
