//! Few-step consistency sampling.

use std::cell::Cell;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clustering::{query_on_tape, ClusterDictionary};
use crate::error::{Error, Result};
use crate::netcore::backbone::{consistency_forward, BackboneConfig, ConditionEmbedding};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::params::ModelParams;
use crate::netcore::tape::Tape;
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::trainer::ConsistencyTrainer;

/// Sub-grid `tau_1 < ... < tau_nfe = T` at evenly spaced grid indices.
pub fn select_nfe_times(grid: &TimeGrid, nfe: usize) -> Result<Vec<f64>> {
    let times = grid.times();
    let n = times.len();
    if nfe == 0 || nfe > n {
        return Err(Error::InvalidArgument(format!("nfe must lie in 1..={n}, got {nfe}")));
    }
    if nfe == 1 {
        return Ok(vec![times[n - 1]]);
    }
    Ok((0..nfe).map(|j| times[j * (n - 1) / (nfe - 1)]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOptions {
    pub nfe: usize,
    pub seed: u64,
    /// Re-noise with the initial draw at every step instead of fresh noise.
    pub reuse_noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// One clamped latent per row.
    pub latents: Array2<f64>,
    /// Network evaluations per trajectory.
    pub evaluations: usize,
}

/// Frozen network plus everything needed to sample from it.
#[derive(Debug, Clone)]
pub struct ConsistencyModel {
    pub backbone: BackboneConfig,
    pub params: ModelParams,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub dict: Option<ClusterDictionary>,
    pub eta: f64,
    evaluations: Cell<usize>,
}

impl ConsistencyModel {
    pub fn new(
        backbone: BackboneConfig,
        params: ModelParams,
        schedule: NoiseSchedule,
        grid: TimeGrid,
        dict: Option<ClusterDictionary>,
        eta: f64,
    ) -> Result<Self> {
        crate::netcore::backbone::init_params(&backbone, 0).check_layout(&params, "sampler parameters")?;
        if dict.is_some() && backbone.cluster_dim.is_none() {
            return Err(Error::Config("dictionary given to a model without fusion maps".into()));
        }
        Ok(Self {
            backbone,
            params,
            schedule,
            grid,
            dict,
            eta,
            evaluations: Cell::new(0),
        })
    }

    /// Samples with the EMA target parameters of a trainer.
    pub fn from_trainer(trainer: &ConsistencyTrainer) -> Result<Self> {
        Self::new(
            trainer.backbone,
            trainer.target.clone(),
            trainer.schedule,
            trainer.grid.clone(),
            trainer.dict.clone(),
            trainer.config.eta,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_trainer(&ConsistencyTrainer::from_checkpoint(ckpt)?)
    }

    /// Total batched network evaluations since construction.
    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }

    fn cluster_ref(&self, conds: &[ConditionEmbedding]) -> Result<Option<Array2<f64>>> {
        let Some(dict) = &self.dict else {
            return Ok(None);
        };
        let nulls = conds.iter().filter(|c| c.is_null()).count();
        if nulls == conds.len() {
            return Ok(None);
        }
        if nulls > 0 {
            return Err(Error::InvalidArgument(
                "cannot mix null and text conditions when sampling with a dictionary".into(),
            ));
        }
        let mut q = Array2::zeros((conds.len(), dict.key_dim()));
        for (r, c) in conds.iter().enumerate() {
            if let ConditionEmbedding::Text(v) = c {
                if v.len() != dict.key_dim() {
                    return Err(Error::Shape {
                        context: "condition embedding",
                        expected: vec![dict.key_dim()],
                        actual: vec![v.len()],
                    });
                }
                q.row_mut(r).assign(&ArrayView1::from(v.as_slice()));
            }
        }
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let (rep, _) = query_on_tape(&mut tape, &self.params, qv, dict)?;
        Ok(Some(tape.value(rep).clone()))
    }

    fn denoise(
        &self,
        x: &Array2<f64>,
        t: f64,
        conds: &[ConditionEmbedding],
        cluster_ref: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let r = cluster_ref.map(|c| tape.constant(c.clone()));
        let times = vec![t; x.nrows()];
        let out = consistency_forward(&mut tape, &self.params, &self.backbone, xv, &times, conds, r, self.eta)?;
        self.evaluations.set(self.evaluations.get() + 1);
        Ok(tape.value(out).mapv(|v| v.clamp(-1.0, 1.0)))
    }

    /// One latent per condition, all sharing the same sub-grid.
    pub fn sample(&self, conds: &[ConditionEmbedding], options: SampleOptions) -> Result<SampleOutput> {
        if conds.is_empty() {
            return Err(Error::Empty("conditions"));
        }
        let taus = select_nfe_times(&self.grid, options.nfe)?;
        let cluster_ref = self.cluster_ref(conds)?;
        let d = self.backbone.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let gauss = |rng: &mut ChaCha8Rng| -> Array2<f64> {
            Array2::from_shape_fn((conds.len(), d), |_| StandardNormal.sample(rng))
        };
        let first = gauss(&mut rng);
        let before = self.evaluations();
        let mut x_hat = self.denoise(&first, taus[taus.len() - 1], conds, cluster_ref.as_ref())?;
        for &tau in taus[..taus.len() - 1].iter().rev() {
            let (a, s) = self.schedule.alpha_sigma(tau)?;
            let z = if options.reuse_noise { first.clone() } else { gauss(&mut rng) };
            let x = &x_hat * a + &z * s;
            x_hat = self.denoise(&x, tau, conds, cluster_ref.as_ref())?;
        }
        Ok(SampleOutput {
            latents: x_hat,
            evaluations: self.evaluations() - before,
        })
    }
}
