//! Reference machinery: exact finite-set denoiser, deterministic many-step
//! probability-flow sampler, and a conventionally trained denoising baseline.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::netcore::backbone::{consistency_forward, init_params, BackboneConfig, ConditionEmbedding};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::optim::{AdamW, AdamWConfig};
use crate::netcore::params::ModelParams;
use crate::netcore::tape::Tape;
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::trainer::TrainingSet;

/// Posterior mean `E[x_0 | x_t]` under the empirical distribution of `dataset` rows.
///
/// At `t = 0` returns the nearest row.
pub fn exact_denoiser(
    x_t: ArrayView1<f64>,
    t: f64,
    dataset: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if dataset.nrows() == 0 {
        return Err(Error::Empty("dataset"));
    }
    if x_t.len() != dataset.ncols() {
        return Err(Error::Shape {
            context: "exact_denoiser",
            expected: vec![dataset.ncols()],
            actual: vec![x_t.len()],
        });
    }
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    let sq: Vec<f64> = dataset
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(x_t).map(|(p, x)| (x - alpha * p).powi(2)).sum())
        .collect();
    if sigma == 0.0 {
        let best = sq
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty");
        return Ok(dataset.row(best).to_vec());
    }
    let logits: Vec<f64> = sq.iter().map(|s| -s / (2.0 * sigma * sigma)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; dataset.ncols()];
    for (wi, row) in w.iter().zip(dataset.rows()) {
        for (o, p) in out.iter_mut().zip(row) {
            *o += wi / z * p;
        }
    }
    Ok(out)
}

/// Batched [`exact_denoiser`].
pub fn exact_denoiser_batch(
    x_t: &Array2<f64>,
    t: f64,
    dataset: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x_t.raw_dim());
    for (r, row) in x_t.rows().into_iter().enumerate() {
        let d = exact_denoiser(row, t, dataset, schedule)?;
        out.row_mut(r).assign(&ArrayView1::from(d.as_slice()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfOdeOutput {
    /// State at the final time `epsilon`.
    pub terminal: Array2<f64>,
    /// Denoiser output at the terminal state.
    pub denoised: Array2<f64>,
}

/// Times `T = t_0 > ... > t_steps = epsilon` evenly spaced in log-SNR.
pub fn log_snr_grid(schedule: &NoiseSchedule, t_max: f64, epsilon: f64, steps: usize) -> Result<Vec<f64>> {
    let (l0, l1) = (schedule.log_snr(t_max)?, schedule.log_snr(epsilon)?);
    let mut ts = Vec::with_capacity(steps + 1);
    ts.push(t_max);
    for k in 1..steps {
        let lambda = l0 + (l1 - l0) * k as f64 / steps as f64;
        ts.push(schedule.time_for_log_snr(lambda)?);
    }
    ts.push(epsilon);
    Ok(ts)
}

/// Euler integration of the probability-flow ODE, written in log-SNR:
/// `dx/dlambda = alpha (x0_hat - alpha x)`.
///
/// Starts from unit Gaussian rows drawn from `seed`.
pub fn pf_ode_euler_sample<F>(
    mut denoiser: F,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    rows: usize,
    dim: usize,
    steps: usize,
    seed: u64,
) -> Result<PfOdeOutput>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    if steps < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 steps, got {steps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(&mut rng));
    let ts = log_snr_grid(schedule, grid.t_max(), grid.epsilon(), steps)?;
    for w in ts.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let h = schedule.log_snr(t_next)? - schedule.log_snr(t)?;
        let alpha = schedule.alpha(t)?;
        let x0 = denoiser(&x, t)?;
        x = &x + &((&x0 - &(&x * alpha)) * (alpha * h));
    }
    let denoised = denoiser(&x, grid.epsilon())?;
    Ok(PfOdeOutput { terminal: x, denoised })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub eta: f64,
    /// Probability of replacing a condition with the null embedding.
    pub cond_dropout: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            eta: crate::schedule::DEFAULT_SKIP_ETA,
            cond_dropout: 0.1,
        }
    }
}

/// Denoising network trained by direct clean-latent regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBaseline {
    pub backbone: BackboneConfig,
    pub config: BaselineConfig,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub params: ModelParams,
    opt: AdamW,
    step: u64,
}

impl ScoreBaseline {
    pub fn new(
        backbone: BackboneConfig,
        config: BaselineConfig,
        schedule: NoiseSchedule,
        grid: TimeGrid,
        init_seed: u64,
    ) -> Result<Self> {
        if backbone.cluster_dim.is_some() {
            return Err(Error::Config("the baseline uses no clustering guidance".into()));
        }
        if !(0.0..=1.0).contains(&config.cond_dropout) {
            return Err(Error::Config("condition dropout must lie in [0, 1]".into()));
        }
        let params = init_params(&backbone, init_seed);
        let opt = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                ..AdamWConfig::default()
            },
            &params,
        );
        Ok(Self {
            backbone,
            config,
            schedule,
            grid,
            params,
            opt,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clean-latent prediction.
    pub fn denoise(&self, x_t: &Array2<f64>, t: f64, conds: &[ConditionEmbedding]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let times = vec![t; x_t.nrows()];
        let out = consistency_forward(&mut tape, &self.params, &self.backbone, x, &times, conds, None, self.config.eta)?;
        Ok(tape.value(out).clone())
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self, data: &TrainingSet) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        let b = self.config.batch;
        let d = data.latents.ncols();
        let times = self.grid.times();
        let mut x_eps = Array2::zeros((b, d));
        let mut x_t = Array2::zeros((b, d));
        let mut ts = Vec::with_capacity(b);
        let mut conds = Vec::with_capacity(b);
        for r in 0..b {
            let i = rng.gen_range(0..data.len());
            let t = times[rng.gen_range(0..times.len())];
            let (a, s) = self.schedule.alpha_sigma(t)?;
            x_eps.row_mut(r).assign(&data.latents.row(i));
            for c in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                x_t[[r, c]] = a * data.latents[[i, c]] + s * z;
            }
            ts.push(t);
            conds.push(if rng.gen::<f64>() < self.config.cond_dropout {
                ConditionEmbedding::Null
            } else {
                ConditionEmbedding::Text(data.embeddings[i].clone())
            });
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x_t);
        let out = consistency_forward(&mut tape, &self.params, &self.backbone, xv, &ts, &conds, None, self.config.eta)?;
        let target = tape.constant(x_eps);
        let loss = tape.smooth_l1_mean(out, target)?;
        let value = tape.scalar(loss);
        let grads = tape.gradients(loss, &self.params)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("baseline loss {value}"),
            });
        }
        self.opt
            .step(&mut self.params, &grads)
            .map_err(|e| Error::Diverged {
                step: self.step,
                detail: e.to_string(),
            })?;
        self.step += 1;
        Ok(value)
    }

    /// Runs the remaining steps up to `config.steps`.
    pub fn train(&mut self, data: &TrainingSet) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while (self.step as usize) < self.config.steps {
            losses.push(self.step(data)?);
        }
        Ok(losses)
    }

    /// Deterministic many-step samples, one row per condition.
    pub fn sample(&self, conds: &[ConditionEmbedding], steps: usize, seed: u64) -> Result<PfOdeOutput> {
        pf_ode_euler_sample(
            |x, t| self.denoise(x, t, conds),
            &self.schedule,
            &self.grid,
            conds.len(),
            self.backbone.latent_dim,
            steps,
            seed,
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.backbone.write_meta(&mut c, "model.");
        let b = &self.config;
        c.set_meta("baseline.steps", b.steps.to_string());
        c.set_meta("baseline.batch", b.batch.to_string());
        c.set_meta("baseline.lr", b.lr.to_string());
        c.set_meta("baseline.seed", b.seed.to_string());
        c.set_meta("baseline.eta", b.eta.to_string());
        c.set_meta("baseline.cond_dropout", b.cond_dropout.to_string());
        c.set_meta("schedule.beta0", self.schedule.beta0().to_string());
        c.set_meta("schedule.beta1", self.schedule.beta1().to_string());
        c.set_meta("grid.epsilon", self.grid.epsilon().to_string());
        c.set_meta("grid.t_max", self.grid.t_max().to_string());
        c.set_meta("grid.points", self.grid.len().to_string());
        c.set_meta("grid.rho", self.grid.rho().to_string());
        c.push_params("baseline.", &self.params);
        for (name, arr) in self.opt.state_arrays(&self.params) {
            c.push_array2(name, &arr);
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
        let config = BaselineConfig {
            steps: get(ckpt, "baseline.steps")?,
            batch: get(ckpt, "baseline.batch")?,
            lr: get(ckpt, "baseline.lr")?,
            seed: get(ckpt, "baseline.seed")?,
            eta: get(ckpt, "baseline.eta")?,
            cond_dropout: get(ckpt, "baseline.cond_dropout")?,
        };
        let schedule = NoiseSchedule::new(get(ckpt, "schedule.beta0")?, get(ckpt, "schedule.beta1")?)?;
        let grid = TimeGrid::karras(
            get(ckpt, "grid.epsilon")?,
            get(ckpt, "grid.t_max")?,
            get(ckpt, "grid.points")?,
            get(ckpt, "grid.rho")?,
        )?;
        let params = ckpt.params("baseline.");
        init_params(&backbone, 0).check_layout(&params, "baseline parameters")?;
        let opt = AdamW::from_state(
            AdamWConfig {
                lr: config.lr,
                ..AdamWConfig::default()
            },
            &params,
            |k| ckpt.array2(k),
        )?;
        let step = opt.steps_taken();
        Ok(Self {
            backbone,
            config,
            schedule,
            grid,
            params,
            opt,
            step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::standard()
    }

    #[test]
    fn singleton_and_symmetric_sets() {
        let s = sched();
        let one = array![[0.3, -0.7]];
        for t in [0.0, 0.01, 0.5, 1.0] {
            let d = exact_denoiser(array![5.0, 2.0].view(), t, one.view(), &s).unwrap();
            assert_eq!(d, vec![0.3, -0.7]);
        }
        let pair = array![[0.4, -0.2], [-0.4, 0.2]];
        for t in [0.01, 0.3, 1.0] {
            let d = exact_denoiser(array![0.0, 0.0].view(), t, pair.view(), &s).unwrap();
            assert!(d.iter().all(|v| v.abs() < 1e-15));
        }
        let near = exact_denoiser(array![0.3, -0.1].view(), 0.0, pair.view(), &s).unwrap();
        assert_eq!(near, vec![0.4, -0.2]);
        assert!(exact_denoiser(array![0.0].view(), 0.5, pair.view(), &s).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(exact_denoiser(array![0.0, 0.0].view(), 0.5, empty.view(), &s).is_err());
    }

    #[test]
    fn matches_direct_evaluation() {
        let s = sched();
        let data = array![[0.1, 0.5, -0.3], [-0.6, 0.2, 0.9], [0.7, -0.8, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.3..1.0);
            let x = ndarray::Array1::from_shape_fn(3, |_| rng.gen_range(-1.5..1.5));
            let (a, sg) = s.alpha_sigma(t).unwrap();
            let w: Vec<f64> = data
                .rows()
                .into_iter()
                .map(|r| {
                    let d2: f64 = r.iter().zip(&x).map(|(p, v)| (v - a * p).powi(2)).sum();
                    (-d2 / (2.0 * sg * sg)).exp()
                })
                .collect();
            let z: f64 = w.iter().sum();
            let direct: Vec<f64> = (0..3)
                .map(|c| w.iter().zip(data.rows()).map(|(wi, r)| wi * r[c]).sum::<f64>() / z)
                .collect();
            let got = exact_denoiser(x.view(), t, data.view(), &s).unwrap();
            for (g, d) in got.iter().zip(&direct) {
                assert!((g - d).abs() < 1e-13, "{g} vs {d}");
            }
        }
        // stabilized path survives where direct weights underflow
        let x = array![30.0, 30.0, 30.0];
        let d = exact_denoiser(x.view(), 0.002, data.view(), &s).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn output_in_convex_hull(
            pts in proptest::collection::vec(-1.0f64..1.0, 4),
            x in proptest::collection::vec(-3.0f64..3.0, 1),
            t in 0.002f64..1.0,
        ) {
            let data = Array2::from_shape_vec((4, 1), pts.clone()).unwrap();
            let d = exact_denoiser(ArrayView1::from(&x[..]), t, data.view(), &sched()).unwrap();
            let lo = pts.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = pts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d[0] >= lo - 1e-12 && d[0] <= hi + 1e-12);
        }
    }

    #[test]
    fn singleton_trajectory_matches_closed_form() {
        let s = sched();
        let grid = TimeGrid::default_grid();
        let star = array![[0.25, -0.5, 0.75]];
        let run = |steps| {
            pf_ode_euler_sample(
                |x, t| exact_denoiser_batch(x, t, star.view(), &s),
                &s,
                &grid,
                4,
                3,
                steps,
                11,
            )
            .unwrap()
        };
        // x(t) = alpha_t x* + sigma_t (x_T - alpha_T x*) / sigma_T
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_t = Array2::<f64>::from_shape_fn((4, 3), |_| StandardNormal.sample(&mut rng));
        let (a_t, s_t) = s.alpha_sigma(1.0).unwrap();
        let (a_e, s_e) = s.alpha_sigma(grid.epsilon()).unwrap();
        let exact = Array2::from_shape_fn((4, 3), |(r, c)| {
            a_e * star[[0, c]] + s_e * (x_t[[r, c]] - a_t * star[[0, c]]) / s_t
        });
        let max_err = |o: &PfOdeOutput| (&o.terminal - &exact).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        let (o200, o400) = (run(200), run(400));
        for r in 0..4 {
            for c in 0..3 {
                assert!((o200.denoised[[r, c]] - star[[0, c]]).abs() < 1e-3);
            }
        }
        let (e200, e400) = (max_err(&o200), max_err(&o400));
        assert!(e200 < 3e-3, "{e200}");
        // first-order method: doubling the steps roughly halves the error
        let ratio = e200 / e400;
        assert!((1.6..2.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn euler_self_converges() {
        let s = sched();
        let grid = TimeGrid::default_grid();
        let pair = array![[0.5], [-0.3]];
        let run = |steps| {
            pf_ode_euler_sample(
                |x, t| exact_denoiser_batch(x, t, pair.view(), &s),
                &s,
                &grid,
                16,
                1,
                steps,
                4,
            )
            .unwrap()
            .terminal
        };
        let reference = run(6400);
        let err = |x: Array2<f64>| (&x - &reference).mapv(f64::abs).sum();
        let (e200, e400) = (err(run(200)), err(run(400)));
        assert!(e400 < e200, "{e400} vs {e200}");
        assert_eq!(run(200), run(200));
        assert!(pf_ode_euler_sample(|x, _| Ok(x.clone()), &s, &grid, 1, 1, 9, 0).is_err());
    }

    fn tiny_baseline(steps: usize) -> (ScoreBaseline, TrainingSet) {
        let backbone = BackboneConfig {
            time_dim: 8,
            ..BackboneConfig::new(4, 32, 2, 2)
        };
        let cfg = BaselineConfig {
            steps,
            batch: 32,
            lr: 3e-3,
            ..BaselineConfig::default()
        };
        let data = TrainingSet::new(array![[0.3, -0.2, 0.5, 0.1]], vec![vec![1.0, 0.0]]).unwrap();
        let b = ScoreBaseline::new(backbone, cfg, sched(), TimeGrid::default_grid(), 1).unwrap();
        (b, data)
    }

    #[test]
    fn baseline_overfits_single_item() {
        let (mut b, data) = tiny_baseline(5000);
        let losses = b.train(&data).unwrap();
        let early: f64 = losses[..100].iter().sum::<f64>() / 100.0;
        let late: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(late < early, "{late} vs {early}");
        // root-mean-square error over coordinates and 64 noise draws per grid time
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cond = vec![ConditionEmbedding::Text(vec![1.0, 0.0]); 64];
        let mut worst = 0.0f64;
        for &t in b.grid.times() {
            let (a, s) = b.schedule.alpha_sigma(t).unwrap();
            let x = Array2::from_shape_fn((64, 4), |(_, c)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                a * data.latents[[0, c]] + s * z
            });
            let pred = b.denoise(&x, t, &cond).unwrap();
            let mse = (&pred - &data.latents.row(0)).mapv(|v| v * v).mean().unwrap();
            worst = worst.max(mse.sqrt());
        }
        assert!(worst < 1e-2, "{worst}");
    }

    #[test]
    fn baseline_checkpoint_round_trip() {
        let (mut b, data) = tiny_baseline(10);
        for _ in 0..3 {
            b.step(&data).unwrap();
        }
        let bytes = b.to_checkpoint().to_bytes().unwrap();
        let mut r = ScoreBaseline::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(r, b);
        assert_eq!(r.step(&data).unwrap(), b.step(&data).unwrap());
        assert_eq!(r.to_checkpoint().to_bytes().unwrap(), b.to_checkpoint().to_bytes().unwrap());
    }
}
