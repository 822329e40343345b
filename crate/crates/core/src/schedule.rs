//! Variance-preserving diffusion schedule.
//!
//! The forward process is parameterised by the cumulative signal level
//! `alpha_bar[t]`, from which `alpha(t) = sqrt(alpha_bar[t])` and
//! `beta(t) = sqrt(1 - alpha_bar[t])` are derived, so that
//! `alpha(t)^2 + beta(t)^2 = 1` at every index.
//!
//! Besides the plain forward draw `x_t ~ N(alpha(t) x_0, beta(t)^2 I)` the
//! table exposes the bridge `x_t | x_tau` with scale `a = alpha(t)/alpha(tau)`
//! and variance `b^2 = beta(t)^2 - (a beta(tau))^2`, which is what time-travel
//! resampling draws from, and the deterministic reverse step used by the
//! sampler.

use nalgebra::DVector;
use thiserror::Error;

use crate::rng::{standard_normal, Generator};

/// Smallest admissible `alpha_bar[T]`; keeps `alpha(t)` bounded away from 0.
pub const ALPHA_BAR_MIN: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("time index {t} outside [0, {max}]")]
    TimeOutOfRange { t: usize, max: usize },
    #[error("time ordering violated: expected {lo} < {hi}")]
    Ordering { lo: usize, hi: usize },
    #[error("schedule singular at t = {t}: alpha(t) = 0")]
    Singular { t: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

/// Bridge distribution parameters for `x_t | x_tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardBridgeParams {
    /// Scale applied to the conditioning state.
    pub a: f64,
    /// Variance of the added noise.
    pub b_sq: f64,
}

/// Discretized diffusion schedule: `alpha_bar` over `0..=T` plus the
/// subsequence of indices the sampler visits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    num_timesteps: usize,
    alpha_bar: Vec<f64>,
    sampling_times: Vec<usize>,
}

impl ScheduleTable {
    /// Build a table from explicit `alpha_bar` values (length `T + 1`,
    /// `alpha_bar[0] = 1`, strictly decreasing) and sampling times
    /// (strictly increasing, first 0, last `T`).
    pub fn new(alpha_bar: Vec<f64>, sampling_times: Vec<usize>) -> Result<Self, ScheduleError> {
        if alpha_bar.len() < 2 {
            return Err(ScheduleError::Invalid(
                "alpha_bar needs at least two entries".into(),
            ));
        }
        let num_timesteps = alpha_bar.len() - 1;
        if alpha_bar[0] != 1.0 {
            return Err(ScheduleError::Invalid(format!(
                "alpha_bar[0] must be 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, &v) in alpha_bar.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(ScheduleError::Invalid(format!(
                    "alpha_bar[{t}] = {v} outside (0, 1]"
                )));
            }
            if t > 0 && v >= alpha_bar[t - 1] {
                return Err(ScheduleError::Invalid(format!(
                    "alpha_bar not strictly decreasing at t = {t}"
                )));
            }
        }
        if sampling_times.len() < 2 {
            return Err(ScheduleError::Invalid(
                "sampling_times needs at least two entries".into(),
            ));
        }
        if sampling_times[0] != 0 {
            return Err(ScheduleError::Invalid(
                "sampling_times must start at 0".into(),
            ));
        }
        if *sampling_times.last().unwrap() != num_timesteps {
            return Err(ScheduleError::Invalid(format!(
                "sampling_times must end at T = {num_timesteps}"
            )));
        }
        for w in sampling_times.windows(2) {
            if w[1] <= w[0] {
                return Err(ScheduleError::Invalid(format!(
                    "sampling_times not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self {
            num_timesteps,
            alpha_bar,
            sampling_times,
        })
    }

    /// Linear-in-`t` `alpha_bar` from 1 down to `end` (clamped at
    /// [`ALPHA_BAR_MIN`]), with `n_sampling` uniformly spaced sampling times.
    pub fn linear(
        num_timesteps: usize,
        end: f64,
        n_sampling: usize,
    ) -> Result<Self, ScheduleError> {
        let alpha_bar = linear_alpha_bar(num_timesteps, 1.0, end)?;
        let times = uniform_sampling_times(num_timesteps, n_sampling)?;
        Self::new(alpha_bar, times)
    }

    /// The default table: `T = 1000`, linear `alpha_bar` down to 1e-5,
    /// 200 sampling steps.
    pub fn default_table() -> Self {
        Self::linear(1000, ALPHA_BAR_MIN, 200).expect("default schedule is valid")
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check_time(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn sampling_times(&self) -> &[usize] {
        &self.sampling_times
    }

    fn check_time(&self, t: usize) -> Result<(), ScheduleError> {
        if t > self.num_timesteps {
            return Err(ScheduleError::TimeOutOfRange {
                t,
                max: self.num_timesteps,
            });
        }
        Ok(())
    }

    /// `(alpha(t), beta(t)) = (sqrt(alpha_bar), sqrt(1 - alpha_bar))`.
    pub fn alpha_beta(&self, t: usize) -> Result<(f64, f64), ScheduleError> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Bridge parameters for `x_t | x_tau`, `tau <= t`.
    pub fn bridge_params(&self, tau: usize, t: usize) -> Result<ForwardBridgeParams, ScheduleError> {
        if tau > t {
            return Err(ScheduleError::Ordering { lo: tau, hi: t });
        }
        let (a_tau, b_tau) = self.alpha_beta(tau)?;
        let (a_t, b_t) = self.alpha_beta(t)?;
        let a = a_t / a_tau;
        let b_sq = (b_t * b_t - (a * b_tau) * (a * b_tau)).max(0.0);
        Ok(ForwardBridgeParams { a, b_sq })
    }

    /// Draw `x_t ~ N(alpha(t) x_0, beta(t)^2 I)`.
    pub fn sample_forward(
        &self,
        x0: &DVector<f64>,
        t: usize,
        rng: &mut Generator,
    ) -> Result<DVector<f64>, ScheduleError> {
        let (alpha, beta) = self.alpha_beta(t)?;
        let eps = standard_normal(rng, x0.len());
        Ok(x0 * alpha + eps * beta)
    }

    /// Re-noise `x_tau` up to time `t > tau` through the forward bridge.
    pub fn resample_bridge(
        &self,
        x_prev: &DVector<f64>,
        tau: usize,
        t: usize,
        rng: &mut Generator,
    ) -> Result<DVector<f64>, ScheduleError> {
        if tau >= t {
            return Err(ScheduleError::Ordering { lo: tau, hi: t });
        }
        let p = self.bridge_params(tau, t)?;
        let eps = standard_normal(rng, x_prev.len());
        Ok(x_prev * p.a + eps * p.b_sq.sqrt())
    }

    /// Deterministic reverse step: recover `x_hat_0` from the predicted
    /// noise, then re-noise it to `t_prev` with the same prediction.
    pub fn ddim_reverse_step(
        &self,
        x_t: &DVector<f64>,
        eps_hat: &DVector<f64>,
        t: usize,
        t_prev: usize,
    ) -> Result<DVector<f64>, ScheduleError> {
        if t_prev >= t {
            return Err(ScheduleError::Ordering { lo: t_prev, hi: t });
        }
        let (alpha, beta) = self.alpha_beta(t)?;
        let (alpha_prev, beta_prev) = self.alpha_beta(t_prev)?;
        if alpha == 0.0 {
            return Err(ScheduleError::Singular { t });
        }
        let x0_hat = (x_t - eps_hat * beta) / alpha;
        Ok(x0_hat * alpha_prev + eps_hat * beta_prev)
    }
}

fn linear_alpha_bar(num_timesteps: usize, start: f64, end: f64) -> Result<Vec<f64>, ScheduleError> {
    if num_timesteps == 0 {
        return Err(ScheduleError::Invalid("num_timesteps must be >= 1".into()));
    }
    let end = end.max(ALPHA_BAR_MIN);
    if end >= start {
        return Err(ScheduleError::Invalid(format!(
            "linear schedule needs end < start, got {end} >= {start}"
        )));
    }
    let t_max = num_timesteps as f64;
    Ok((0..=num_timesteps)
        .map(|t| {
            if t == num_timesteps {
                end
            } else {
                start + (end - start) * (t as f64) / t_max
            }
        })
        .collect())
}

fn uniform_sampling_times(num_timesteps: usize, n: usize) -> Result<Vec<usize>, ScheduleError> {
    if n < 2 || n > num_timesteps + 1 {
        return Err(ScheduleError::Invalid(format!(
            "uniform sampling needs 2 <= N <= T + 1, got N = {n}, T = {num_timesteps}"
        )));
    }
    let step = num_timesteps as f64 / (n - 1) as f64;
    Ok((0..n)
        .map(|i| ((i as f64) * step).round() as usize)
        .collect())
}
