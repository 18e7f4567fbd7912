use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::netcore::params::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept `f32`-representable,
/// like the parameters, so a checkpointed optimizer resumes bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        let zeros: Vec<_> = params
            .values()
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient rejects the whole update and
    /// leaves both parameters and optimizer state untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if grads.values().len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                context: "adamw_step",
                expected: vec![params.len()],
                actual: vec![grads.values().len()],
            });
        }
        for ((name, p), g) in params.iter().zip(grads.values()) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    context: "adamw_step",
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = (beta1 * *m + (1.0 - beta1) * g) as f32 as f64;
                *v = (beta2 * *v + (1.0 - beta2) * g * g) as f32 as f64;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let decayed = *p - lr * weight_decay * *p;
                *p = (decayed - lr * m_hat / (v_hat.sqrt() + eps)) as f32 as f64;
            });
        }
        Ok(())
    }

    /// Optimizer state as named arrays (`opt.step`, `opt.m.<name>`, `opt.v.<name>`).
    pub fn state_arrays(&self, params: &ModelParams) -> Vec<(String, Array2<f64>)> {
        let mut out = vec![(
            "opt.step".to_string(),
            Array2::from_elem((1, 1), self.step as f64),
        )];
        for ((name, m), v) in params.names().iter().zip(&self.m).zip(&self.v) {
            out.push((format!("opt.m.{name}"), m.clone()));
            out.push((format!("opt.v.{name}"), v.clone()));
        }
        out
    }

    /// Rebuilds state written by [`state_arrays`](Self::state_arrays).
    pub fn from_state(
        config: AdamWConfig,
        params: &ModelParams,
        lookup: impl Fn(&str) -> Option<Array2<f64>>,
    ) -> Result<Self> {
        let step = lookup("opt.step").ok_or_else(|| Error::MissingParam("opt.step".into()))?;
        let mut opt = Self::new(config, params);
        opt.step = step[[0, 0]] as u64;
        for (i, (name, p)) in params.iter().enumerate() {
            for (prefix, slot) in [("opt.m", &mut opt.m[i]), ("opt.v", &mut opt.v[i])] {
                let key = format!("{prefix}.{name}");
                let arr = lookup(&key).ok_or(Error::MissingParam(key))?;
                if arr.shape() != p.shape() {
                    return Err(Error::Shape {
                        context: "optimizer state",
                        expected: p.shape().to_vec(),
                        actual: arr.shape().to_vec(),
                    });
                }
                *slot = arr;
            }
        }
        Ok(opt)
    }
}

/// `target <- gamma * target + (1 - gamma) * online`, array by array.
pub fn ema_update(target: &mut ModelParams, online: &ModelParams, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "EMA rate must lie in [0, 1], got {gamma}"
        )));
    }
    target.check_layout(online, "ema_update")?;
    for (t, o) in target.values_mut().iter_mut().zip(online.values()) {
        Zip::from(t).and(o).for_each(|t, &o| {
            *t = (gamma * *t + (1.0 - gamma) * o) as f32 as f64;
        });
    }
    Ok(())
}
