//! Guided consistency training on frozen codec latents.
//!
//! One step, per batch item: perturb the clean latent to `x_t` at a random
//! adjacent grid pair `(t_i, t_{i-1})`, form the guided clean estimate
//! `clamp((1 + w) x_eps - w S(x_t, t_i, null))`, take one first-order solver
//! step to `t_{i-1}`, and regress the online output at `t_i` onto the target
//! network's output there. The null branch is regressed onto `x_eps`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clustering::{query_on_tape, ClusterDictionary};
use crate::error::{Error, Result};
use crate::netcore::backbone::{consistency_forward, init_params, BackboneConfig, ConditionEmbedding};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::optim::{ema_update, AdamW, AdamWConfig};
use crate::netcore::params::ModelParams;
use crate::netcore::tape::{Tape, Var};
use crate::schedule::{dpmpp_coeffs, NoiseSchedule, TimeGrid, DEFAULT_SKIP_ETA};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub omega: f64,
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub huber_c: f64,
    pub seed: u64,
    pub eta: f64,
    pub use_clustering: bool,
}

impl TrainConfig {
    /// Defaults for a latent of `latent_dim` entries.
    pub fn for_latent(latent_dim: usize) -> Self {
        Self {
            omega: 4.0,
            gamma: 0.995,
            lr: 1e-4,
            steps: 20_000,
            batch: 64,
            huber_c: default_huber_c(latent_dim),
            seed: 0,
            eta: DEFAULT_SKIP_ETA,
            use_clustering: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(self.omega >= 0.0) {
            return Err(Error::Config(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.huber_c > 0.0) {
            return Err(Error::Config(format!("huber_c must be > 0, got {}", self.huber_c)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// `0.00054 * sqrt(latent_dim)`.
pub fn default_huber_c(latent_dim: usize) -> f64 {
    0.00054 * (latent_dim as f64).sqrt()
}

/// Uniform draw of an adjacent grid pair `(t_i, t_{i-1})`.
pub fn sample_adjacent_pair<R: Rng>(grid: &TimeGrid, rng: &mut R) -> Result<(f64, f64)> {
    let times = grid.times();
    if times.len() < 2 {
        return Err(Error::InvalidGrid("need at least two grid points".into()));
    }
    let i = rng.gen_range(1..times.len());
    Ok((times[i], times[i - 1]))
}

/// `clamp((1 + omega) x_eps - omega uncond, -1, 1)`.
pub fn cfg_target(x_eps: &Array2<f64>, uncond: &Array2<f64>, omega: f64) -> Result<Array2<f64>> {
    if x_eps.shape() != uncond.shape() {
        return Err(Error::Shape {
            context: "cfg_target",
            expected: x_eps.shape().to_vec(),
            actual: uncond.shape().to_vec(),
        });
    }
    let mut out = x_eps * (1.0 + omega) - uncond * omega;
    out.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(out)
}

/// Guided clean estimate using the online network's null-condition output.
pub fn simulate_cfg_target(
    params: &ModelParams,
    config: &BackboneConfig,
    x_eps: &Array2<f64>,
    x_t: &Array2<f64>,
    times: &[f64],
    omega: f64,
    eta: f64,
) -> Result<Array2<f64>> {
    let nulls = vec![ConditionEmbedding::Null; x_t.nrows()];
    let uncond =
        crate::netcore::backbone::consistency_apply(params, config, x_t, times, &nulls, None, eta)?;
    cfg_target(x_eps, &uncond, omega)
}

/// `sqrt(|a - b|^2 + c^2) - c`.
pub fn pseudo_huber(a: &[f64], b: &[f64], c: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "pseudo_huber",
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("pseudo-Huber c must be > 0, got {c}")));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    // (sq + c^2) - c^2 over (sqrt(sq + c^2) + c), stable for small sq
    Ok(sq / ((sq + c * c).sqrt() + c))
}

/// Frozen training inputs: clean latents and their condition embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub latents: Array2<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(latents: Array2<f64>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if latents.nrows() != embeddings.len() || latents.nrows() == 0 {
            return Err(Error::Shape {
                context: "training set",
                expected: vec![latents.nrows()],
                actual: vec![embeddings.len()],
            });
        }
        Ok(Self { latents, embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Everything random about one step, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub x_eps: Array2<f64>,
    pub conds: Vec<Vec<f64>>,
    pub noise: Array2<f64>,
    pub t: Vec<f64>,
    pub t_prev: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub consistency: f64,
    pub uncond: f64,
    pub grad_norm: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.consistency + self.uncond
    }
}

/// Online/target pair with optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTrainer {
    pub backbone: BackboneConfig,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub dict: Option<ClusterDictionary>,
    pub online: ModelParams,
    pub target: ModelParams,
    opt: AdamW,
    step: u64,
}

struct StepTape {
    tape: Tape,
    consistency: Var,
    uncond: Var,
    loss: Var,
}

impl ConsistencyTrainer {
    pub fn new(
        backbone: BackboneConfig,
        config: TrainConfig,
        schedule: NoiseSchedule,
        grid: TimeGrid,
        dict: Option<ClusterDictionary>,
        init_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut dict = if config.use_clustering { dict } else { None };
        if let Some(d) = &mut dict {
            d.snap_f32();
        }
        if let Some(d) = &dict {
            if backbone.cluster_dim != Some(d.value_dim()) || backbone.cond_dim != d.key_dim() {
                return Err(Error::Config(
                    "backbone clustering dimensions do not match the dictionary".into(),
                ));
            }
        }
        let online = init_params(&backbone, init_seed);
        let opt = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                ..AdamWConfig::default()
            },
            &online,
        );
        Ok(Self {
            backbone,
            config,
            schedule,
            grid,
            dict,
            target: online.clone(),
            online,
            opt,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Draws the batch for the current step from a per-step stream.
    pub fn draw_batch(&self, data: &TrainingSet) -> Result<StepBatch> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        let b = self.config.batch;
        let d = data.latents.ncols();
        let mut x_eps = Array2::zeros((b, d));
        let mut conds = Vec::with_capacity(b);
        let mut t = Vec::with_capacity(b);
        let mut t_prev = Vec::with_capacity(b);
        for r in 0..b {
            let i = rng.gen_range(0..data.len());
            x_eps.row_mut(r).assign(&data.latents.row(i));
            conds.push(data.embeddings[i].clone());
            let (a, p) = sample_adjacent_pair(&self.grid, &mut rng)?;
            t.push(a);
            t_prev.push(p);
        }
        let noise = Array2::from_shape_fn((b, d), |_| StandardNormal.sample(&mut rng));
        Ok(StepBatch {
            x_eps,
            conds,
            noise,
            t,
            t_prev,
        })
    }

    fn cluster_ref(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        conds: &[Vec<f64>],
    ) -> Result<Option<Var>> {
        let Some(dict) = &self.dict else {
            return Ok(None);
        };
        let dc = dict.key_dim();
        let mut q = Array2::zeros((conds.len(), dc));
        for (r, c) in conds.iter().enumerate() {
            if c.len() != dc {
                return Err(Error::Shape {
                    context: "condition embedding",
                    expected: vec![dc],
                    actual: vec![c.len()],
                });
            }
            q.row_mut(r).assign(&ArrayView1::from(c.as_slice()));
        }
        let qv = tape.constant(q);
        Ok(Some(query_on_tape(tape, params, qv, dict)?.0))
    }

    fn perturbed(&self, batch: &StepBatch) -> Result<Array2<f64>> {
        let mut x_t = batch.x_eps.clone();
        for (r, &t) in batch.t.iter().enumerate() {
            let (a, s) = self.schedule.alpha_sigma(t)?;
            let mut row = x_t.row_mut(r);
            row *= a;
            row.scaled_add(s, &batch.noise.row(r));
        }
        Ok(x_t)
    }

    fn build(&self, batch: &StepBatch) -> Result<StepTape> {
        let cfg = &self.config;
        let x_t = self.perturbed(batch)?;
        let text: Vec<ConditionEmbedding> = batch
            .conds
            .iter()
            .map(|c| ConditionEmbedding::Text(c.clone()))
            .collect();
        let nulls = vec![ConditionEmbedding::Null; batch.t.len()];

        let mut tape = Tape::new();
        let xv = tape.constant(x_t.clone());
        let cref = self.cluster_ref(&mut tape, &self.online, &batch.conds)?;
        let cond_out = consistency_forward(
            &mut tape,
            &self.online,
            &self.backbone,
            xv,
            &batch.t,
            &text,
            cref,
            cfg.eta,
        )?;
        let uncond_out = consistency_forward(
            &mut tape,
            &self.online,
            &self.backbone,
            xv,
            &batch.t,
            &nulls,
            None,
            cfg.eta,
        )?;

        // guided estimate and solver step carry no gradient
        let x_phi = cfg_target(&batch.x_eps, tape.value(uncond_out), cfg.omega)?;
        let mut x_prev = x_t;
        for r in 0..batch.t.len() {
            let (a, b) = dpmpp_coeffs(batch.t[r], batch.t_prev[r], &self.schedule)?;
            let mut row = x_prev.row_mut(r);
            row *= a;
            row.scaled_add(b, &x_phi.row(r));
        }
        let target = {
            let mut tt = Tape::new();
            let xp = tt.constant(x_prev);
            let tref = self.cluster_ref(&mut tt, &self.target, &batch.conds)?;
            let out = consistency_forward(
                &mut tt,
                &self.target,
                &self.backbone,
                xp,
                &batch.t_prev,
                &text,
                tref,
                cfg.eta,
            )?;
            tt.value(out).clone()
        };

        let target = tape.constant(target);
        let cons_rows = tape.pseudo_huber_rows(cond_out, target, cfg.huber_c)?;
        let weights: Vec<f64> = batch
            .t
            .iter()
            .zip(&batch.t_prev)
            .map(|(t, p)| 1.0 / (t - p))
            .collect();
        let cons_rows = tape.scale_rows(cons_rows, weights)?;
        let consistency = tape.mean_all(cons_rows);
        let clean = tape.constant(batch.x_eps.clone());
        let unc_rows = tape.pseudo_huber_rows(uncond_out, clean, cfg.huber_c)?;
        let uncond = tape.mean_all(unc_rows);
        let loss = tape.add(consistency, uncond)?;
        Ok(StepTape {
            tape,
            consistency,
            uncond,
            loss,
        })
    }

    /// Loss components and gradients for `batch` without updating anything.
    pub fn evaluate(&self, batch: &StepBatch) -> Result<(StepLosses, crate::netcore::Gradients)> {
        let st = self.build(batch)?;
        let grads = st.tape.gradients(st.loss, &self.online)?;
        Ok((
            StepLosses {
                consistency: st.tape.scalar(st.consistency),
                uncond: st.tape.scalar(st.uncond),
                grad_norm: grads.norm(),
            },
            grads,
        ))
    }

    /// Applies one step on an explicit batch.
    pub fn step_on(&mut self, batch: &StepBatch) -> Result<StepLosses> {
        let (losses, grads) = self.evaluate(batch)?;
        if !losses.total().is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!(
                    "consistency loss {} / unconditional loss {}",
                    losses.consistency, losses.uncond
                ),
            });
        }
        self.opt
            .step(&mut self.online, &grads)
            .map_err(|e| Error::Diverged {
                step: self.step,
                detail: e.to_string(),
            })?;
        ema_update(&mut self.target, &self.online, self.config.gamma)?;
        self.step += 1;
        Ok(losses)
    }

    pub fn step(&mut self, data: &TrainingSet) -> Result<StepLosses> {
        let batch = self.draw_batch(data)?;
        self.step_on(&batch)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.backbone.write_meta(&mut c, "model.");
        let t = &self.config;
        c.set_meta("train.omega", t.omega.to_string());
        c.set_meta("train.gamma", t.gamma.to_string());
        c.set_meta("train.lr", t.lr.to_string());
        c.set_meta("train.steps", t.steps.to_string());
        c.set_meta("train.batch", t.batch.to_string());
        c.set_meta("train.huber_c", t.huber_c.to_string());
        c.set_meta("train.seed", t.seed.to_string());
        c.set_meta("train.eta", t.eta.to_string());
        c.set_meta("train.use_clustering", t.use_clustering.to_string());
        c.set_meta("schedule.beta0", self.schedule.beta0().to_string());
        c.set_meta("schedule.beta1", self.schedule.beta1().to_string());
        c.set_meta("grid.epsilon", self.grid.epsilon().to_string());
        c.set_meta("grid.t_max", self.grid.t_max().to_string());
        c.set_meta("grid.points", self.grid.len().to_string());
        c.set_meta("grid.rho", self.grid.rho().to_string());
        c.push_params("online.", &self.online);
        c.push_params("target.", &self.target);
        for (name, arr) in self.opt.state_arrays(&self.online) {
            c.push_array2(name, &arr);
        }
        if let Some(d) = &self.dict {
            d.write_into(&mut c);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        fn get<T: std::str::FromStr>(c: &Checkpoint, k: &str) -> Result<T> {
            c.meta(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for `{k}`")))
        }
        let backbone = BackboneConfig::read_meta(ckpt, "model.")?;
        let config = TrainConfig {
            omega: get(ckpt, "train.omega")?,
            gamma: get(ckpt, "train.gamma")?,
            lr: get(ckpt, "train.lr")?,
            steps: get(ckpt, "train.steps")?,
            batch: get(ckpt, "train.batch")?,
            huber_c: get(ckpt, "train.huber_c")?,
            seed: get(ckpt, "train.seed")?,
            eta: get(ckpt, "train.eta")?,
            use_clustering: get(ckpt, "train.use_clustering")?,
        };
        let schedule = NoiseSchedule::new(get(ckpt, "schedule.beta0")?, get(ckpt, "schedule.beta1")?)?;
        let grid = TimeGrid::karras(
            get(ckpt, "grid.epsilon")?,
            get(ckpt, "grid.t_max")?,
            get(ckpt, "grid.points")?,
            get(ckpt, "grid.rho")?,
        )?;
        let dict = if ckpt.array("dict.keys").is_some() {
            Some(ClusterDictionary::read_from(ckpt)?)
        } else {
            None
        };
        let online = ckpt.params("online.");
        let target = ckpt.params("target.");
        let reference = init_params(&backbone, 0);
        reference.check_layout(&online, "online parameters")?;
        reference.check_layout(&target, "target parameters")?;
        let opt = AdamW::from_state(
            AdamWConfig {
                lr: config.lr,
                ..AdamWConfig::default()
            },
            &online,
            |k| ckpt.array2(k),
        )?;
        let step = opt.steps_taken();
        Ok(Self {
            backbone,
            config,
            schedule,
            grid,
            dict,
            online,
            target,
            opt,
            step,
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub losses: StepLosses,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,consistency_loss,uncond_loss,grad_norm,wall_ms";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{}",
            self.step, self.losses.consistency, self.losses.uncond, self.losses.grad_norm, self.wall_ms
        )
    }
}

/// Appends rows to a CSV log, writing the header when the file is new.
pub fn append_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Runs the remaining steps up to `config.steps`, returning the log.
pub fn train(trainer: &mut ConsistencyTrainer, data: &TrainingSet) -> Result<Vec<LogRow>> {
    let start = std::time::Instant::now();
    let mut rows = Vec::new();
    while (trainer.steps_taken() as usize) < trainer.config.steps {
        let step = trainer.steps_taken();
        let losses = trainer.step(data)?;
        rows.push(LogRow {
            step,
            losses,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(rows)
}
