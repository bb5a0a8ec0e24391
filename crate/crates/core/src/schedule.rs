//! Discrete noise schedules.
//!
//! A schedule is built on a base resolution (the training-style step count,
//! 1000 by default) with betas linearly spaced from `beta_start` to
//! `beta_end`. Inference levels `0..=T` subsample the base cumulative product
//! with an even stride, so schedules with different `T` discretize the same
//! underlying process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE_RESOLUTION: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Construction parameters of a linear-beta schedule. This is the JSON form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default = "default_base_resolution")]
    pub base_resolution: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_base_resolution() -> usize {
    DEFAULT_BASE_RESOLUTION
}
fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}
fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 50,
            base_resolution: DEFAULT_BASE_RESOLUTION,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.steps,
            self.base_resolution,
            self.beta_start,
            self.beta_end,
        )
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=T]` of an inference schedule.
///
/// `alpha_bar[0] == 1` exactly and the sequence is strictly decreasing.
/// `base_index[t]` is the base-schedule step that level `t` maps to
/// (`base_index[0] == 0`, `base_index[T] == base_resolution`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    base_index: Vec<usize>,
}

/// Base cumulative products `abar_s` for `s = 1..=n` (index 0 holds `abar_1`).
pub fn linear_base_alpha_bar(n: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut acc = 1.0;
    for s in 0..n {
        let beta = if n == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (s as f64) / ((n - 1) as f64)
        };
        acc *= 1.0 - beta;
        out.push(acc);
    }
    out
}

impl NoiseSchedule {
    pub fn linear(
        steps: usize,
        base_resolution: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if steps > base_resolution {
            return Err(Error::InvalidSchedule(format!(
                "T={steps} exceeds base_resolution={base_resolution}"
            )));
        }
        if !base_resolution.is_multiple_of(steps) {
            return Err(Error::InvalidSchedule(format!(
                "T={steps} does not divide base_resolution={base_resolution}"
            )));
        }
        if !(beta_start.is_finite() && beta_end.is_finite())
            || beta_start <= 0.0
            || beta_start > beta_end
            || beta_end >= 1.0
        {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }

        let base = linear_base_alpha_bar(base_resolution, beta_start, beta_end);
        let stride = base_resolution / steps;
        let base_index: Vec<usize> = (0..=steps).map(|t| t * stride).collect();
        let alpha_bar: Vec<f64> = base_index
            .iter()
            .map(|&b| if b == 0 { 1.0 } else { base[b - 1] })
            .collect();
        if alpha_bar.iter().any(|&a| a.is_nan() || a <= 0.0) {
            return Err(Error::InvalidSchedule(
                "alpha_bar underflowed to zero".into(),
            ));
        }

        Ok(Self::from_parts(
            ScheduleParams {
                steps,
                base_resolution,
                beta_start,
                beta_end,
            },
            alpha_bar,
            base_index,
        ))
    }

    /// Schedule with `steps` levels whose grid refines `base` geometrically:
    /// within each base step the cumulative product is interpolated
    /// log-linearly, so every base level is hit exactly. `steps` must be a
    /// multiple of the base resolution.
    pub fn refined(base: &ScheduleParams, steps: usize) -> Result<Self> {
        let n = base.base_resolution;
        if steps == 0 || !steps.is_multiple_of(n) {
            return Err(Error::InvalidSchedule(format!(
                "refined T={steps} must be a positive multiple of base_resolution={n}"
            )));
        }
        // validates the beta range
        NoiseSchedule::linear(n, n, base.beta_start, base.beta_end)?;
        let coarse = linear_base_alpha_bar(n, base.beta_start, base.beta_end);
        let ratio = steps / n;
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prev_log = 0.0f64;
        for &ab in &coarse {
            let log_ab = ab.ln();
            for j in 1..ratio {
                let u = j as f64 / ratio as f64;
                alpha_bar.push(((1.0 - u) * prev_log + u * log_ab).exp());
            }
            alpha_bar.push(ab);
            prev_log = log_ab;
        }
        Ok(Self::from_parts(
            ScheduleParams {
                steps,
                base_resolution: steps,
                beta_start: base.beta_start,
                beta_end: base.beta_end,
            },
            alpha_bar,
            (0..=steps).collect(),
        ))
    }

    /// Schedule from explicit levels `alpha_bar[0..=T]`; `alpha_bar[0]` must
    /// be 1 and the sequence strictly decreasing and positive. Base indices
    /// are the levels themselves.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two levels".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidSchedule("alpha_bar[0] must be 1".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0] && w[1] > 0.0)) {
            return Err(Error::InvalidSchedule(
                "alpha_bar must be strictly decreasing and positive".into(),
            ));
        }
        let steps = alpha_bar.len() - 1;
        Ok(Self::from_parts(
            ScheduleParams {
                steps,
                base_resolution: steps,
                beta_start: f64::NAN,
                beta_end: f64::NAN,
            },
            alpha_bar,
            (0..=steps).collect(),
        ))
    }

    fn from_parts(params: ScheduleParams, alpha_bar: Vec<f64>, base_index: Vec<usize>) -> Self {
        let sigma = alpha_bar
            .iter()
            .enumerate()
            .map(|(t, &a)| if t == 0 { 0.0 } else { (1.0 / a - 1.0).sqrt() })
            .collect();
        Self {
            params,
            alpha_bar,
            sigma,
            base_index,
        }
    }

    /// Number of inference steps `T`.
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn base_resolution(&self) -> usize {
        self.params.base_resolution
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn base_index(&self) -> &[usize] {
        &self.base_index
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::LevelOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_level(t)?;
        Ok(self.alpha_bar[t])
    }

    /// `sqrt(1/alpha_bar_t - 1)`, exactly zero at `t = 0`.
    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        self.check_level(t)?;
        Ok(self.sigma[t])
    }

    pub fn base_index_at(&self, t: usize) -> Result<usize> {
        self.check_level(t)?;
        Ok(self.base_index[t])
    }
}

impl Serialize for NoiseSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.params.serialize(s)
    }
}

impl<'de> Deserialize<'de> for NoiseSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let params = ScheduleParams::deserialize(d)?;
        params.build().map_err(serde::de::Error::custom)
    }
}
