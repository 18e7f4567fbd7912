//! Continuous-time diffusion algebra for the variance preserving schedule.
//!
//! Everything here is a pure function of `f64` inputs. Times live in `[0, 1]`;
//! the data end of a trajectory is `t = epsilon` and the noise end is `t = T`.

use crate::error::{check_len, Error, Result};

/// Default skip-connection sharpness for [`skip_coeffs`].
pub const DEFAULT_SKIP_ETA: f64 = 0.5;

/// Variance preserving schedule with a linear rate `beta(t) = beta0 + t (beta1 - beta0)`.
///
/// `alpha(t) = exp(-t^2 (beta1 - beta0) / 4 - t beta0 / 2)` and
/// `sigma(t) = sqrt(1 - alpha(t)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    beta0: f64,
    beta1: f64,
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta1 > beta0 && beta1.is_finite()) {
            return Err(Error::InvalidSchedule { beta0, beta1 });
        }
        Ok(Self { beta0, beta1 })
    }

    /// `beta0 = 0.1, beta1 = 20`: the prior at `t = 1` is close to a unit Gaussian.
    pub fn standard() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
        }
    }

    /// `beta0 = 0.002, beta1 = 1`. Leaves `alpha(1) ~ 0.78`, so the terminal
    /// marginal is far from a unit Gaussian.
    pub fn low_rate() -> Self {
        Self {
            beta0: 0.002,
            beta1: 1.0,
        }
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    fn check_closed(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                domain: "[0, 1]",
            })
        }
    }

    /// `log alpha(t)`, the integral of the drift coefficient from 0 to `t`.
    pub fn log_alpha(&self, t: f64) -> Result<f64> {
        Self::check_closed(t)?;
        Ok(-0.25 * t * t * (self.beta1 - self.beta0) - 0.5 * t * self.beta0)
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.log_alpha(t)?.exp())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        let la = self.log_alpha(t)?;
        // 1 - alpha^2 = -expm1(2 log alpha), accurate near t = 0
        Ok((-(2.0 * la).exp_m1()).sqrt())
    }

    /// `(alpha(t), sigma(t))` in one call.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let la = self.log_alpha(t)?;
        Ok((la.exp(), (-(2.0 * la).exp_m1()).sqrt()))
    }

    /// Log signal-to-noise ratio `lambda(t) = log(alpha / sigma)`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        let la = self.log_alpha(t)?;
        if t == 0.0 {
            return Err(Error::InfiniteLogSnr);
        }
        Ok(la - 0.5 * (-(2.0 * la).exp_m1()).ln())
    }

    /// Inverse of [`log_snr`](Self::log_snr) on `(0, 1]`.
    pub fn time_for_log_snr(&self, lambda: f64) -> Result<f64> {
        // -log alpha = 0.5 * log(1 + exp(-2 lambda)) = a t^2 + b t
        let target = 0.5 * (-2.0 * lambda).exp().ln_1p();
        let a = 0.25 * (self.beta1 - self.beta0);
        let b = 0.5 * self.beta0;
        // numerically stable positive root of a t^2 + b t - target = 0
        let t = 2.0 * target / (b + (b * b + 4.0 * a * target).sqrt());
        Self::check_closed(t)?;
        Ok(t)
    }

    /// Rate `beta(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + t * (self.beta1 - self.beta0)
    }

    /// Drift `f(t) = d log(alpha)/dt` and squared diffusion
    /// `g^2(t) = d sigma^2/dt - 2 f(t) sigma^2(t)`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        let f = -0.5 * self.beta(t);
        // sigma^2 = 1 - alpha^2, so d sigma^2 / dt = -2 alpha^2 f
        let dsigma2 = -2.0 * alpha * alpha * f;
        let g2 = dsigma2 - 2.0 * f * sigma * sigma;
        Ok((f, g2))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

/// Ordered timestep discretization of `[epsilon, T]` warped by exponent `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    epsilon: f64,
    t_max: f64,
    rho: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    /// `t_i = (eps^(1/rho) + (i-1)/(N-1) (T^(1/rho) - eps^(1/rho)))^rho` for `i = 1..=N`.
    pub fn karras(epsilon: f64, t_max: f64, n: usize, rho: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < t_max && t_max.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "need 0 < epsilon < T, got epsilon = {epsilon}, T = {t_max}"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need N >= 2, got {n}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidGrid(format!("need rho > 0, got {rho}")));
        }
        let lo = epsilon.powf(1.0 / rho);
        let hi = t_max.powf(1.0 / rho);
        let mut times: Vec<f64> = (0..n)
            .map(|i| (lo + i as f64 / (n - 1) as f64 * (hi - lo)).powf(rho))
            .collect();
        times[0] = epsilon;
        times[n - 1] = t_max;
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(
                "grid is not strictly increasing in floating point".into(),
            ));
        }
        Ok(Self {
            epsilon,
            t_max,
            rho,
            times,
        })
    }

    /// The 50-point `rho = 7` grid over `[0.002, 1]`.
    pub fn default_grid() -> Self {
        Self::karras(0.002, 1.0, 50, 7.0).expect("default grid is valid")
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Boundary-preserving skip coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
}

/// `c_skip = eta^2 / ((10t)^2 + eta^2)`, `c_out = 10t / sqrt((10t)^2 + eta^2)`.
pub fn skip_coeffs(t: f64, eta: f64) -> SkipCoeffs {
    let s = 10.0 * t;
    let denom = s * s + eta * eta;
    SkipCoeffs {
        c_skip: eta * eta / denom,
        c_out: s / denom.sqrt(),
    }
}

/// Forward perturbation `alpha_t x_eps + sigma_t z`.
pub fn perturb(x_eps: &[f64], t: f64, z: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len("perturb", x_eps.len(), z.len())?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(x_eps
        .iter()
        .zip(z)
        .map(|(x, n)| alpha * x + sigma * n)
        .collect())
}

/// Coefficients `(state_scale, data_scale)` of the first-order data-prediction
/// step from `t` to `t_prev`:
/// `x_prev = state_scale * x_t + data_scale * x0_hat`.
pub fn dpmpp_coeffs(t: f64, t_prev: f64, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    if !(t_prev > 0.0 && t_prev < t && t <= 1.0) {
        if t_prev >= t {
            return Err(Error::Ordering { t, t_prev });
        }
        return Err(Error::Domain {
            t: if t > 1.0 { t } else { t_prev },
            domain: "0 < t_prev < t <= 1",
        });
    }
    let (alpha_prev, sigma_prev) = schedule.alpha_sigma(t_prev)?;
    let (_, sigma_t) = schedule.alpha_sigma(t)?;
    let h = schedule.log_snr(t_prev)? - schedule.log_snr(t)?;
    // -alpha_prev (e^{-h} - 1) = alpha_prev * (-expm1(-h))
    Ok((sigma_prev / sigma_t, alpha_prev * -(-h).exp_m1()))
}

/// One first-order DPM-Solver++ step in data-prediction form.
pub fn dpmpp_step(
    x_t: &[f64],
    t: f64,
    t_prev: f64,
    x0_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len("dpmpp_step", x_t.len(), x0_hat.len())?;
    let (a, b) = dpmpp_coeffs(t, t_prev, schedule)?;
    Ok(x_t.iter().zip(x0_hat).map(|(x, d)| a * x + b * d).collect())
}
