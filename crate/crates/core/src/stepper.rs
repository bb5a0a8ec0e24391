//! Deterministic DDIM steps and trajectory runners.
//!
//! With `sigma_t = sqrt(1/abar_t - 1)` both steps are the same forward-Euler
//! update in the rescaled coordinate `z / sqrt(abar)`:
//!
//! ```text
//! denoise: z_{t-1} = sqrt(abar_{t-1}/abar_t) z_t     + sqrt(abar_{t-1}) (sigma_{t-1} - sigma_t) eps
//! invert:  z_t     = sqrt(abar_t/abar_{t-1}) z_{t-1} + sqrt(abar_t)     (sigma_t - sigma_{t-1}) eps
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{guided_epsilon, ConditionEmbedding, EpsilonPredictor};
use crate::schedule::NoiseSchedule;

/// A latent vector at a level of the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub t: usize,
    pub z: Vec<f64>,
}

impl LatentState {
    pub fn new(t: usize, z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent state"));
        }
        Ok(Self { t, z })
    }

    pub fn clean(z: Vec<f64>) -> Result<Self> {
        Self::new(0, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub use_cfg: bool,
}

impl GuidanceConfig {
    /// Conditional prediction only.
    pub const fn plain() -> Self {
        Self {
            omega: 1.0,
            use_cfg: false,
        }
    }

    pub const fn cfg(omega: f64) -> Self {
        Self {
            omega,
            use_cfg: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_cfg && !self.omega.is_finite() {
            return Err(Error::NonFinite("guidance scale"));
        }
        Ok(())
    }

    /// Scale actually applied: `omega` under CFG, else 1.
    pub fn effective_omega(&self) -> f64 {
        if self.use_cfg {
            self.omega
        } else {
            1.0
        }
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::plain()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inverting,
    Denoising,
    Zigzag,
    /// Concatenation of segments of the other kinds.
    Composite,
}

/// Ordered latent states plus the number of predictor evaluations used to
/// produce them. The first state is the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub direction: Direction,
    pub states: Vec<LatentState>,
    pub predictor_calls: usize,
}

impl Trajectory {
    pub fn start(direction: Direction, state: LatentState) -> Self {
        Self {
            direction,
            states: vec![state],
            predictor_calls: 0,
        }
    }

    pub fn last(&self) -> &LatentState {
        self.states
            .last()
            .expect("trajectory always holds its start state")
    }

    /// Number of level transitions recorded.
    pub fn moves(&self) -> usize {
        self.states.len() - 1
    }

    /// Appends `other`, whose first state must coincide with our last one.
    pub fn extend(&mut self, other: Trajectory) -> Result<()> {
        if other.states[0] != *self.last() {
            return Err(Error::LevelOrder(
                "appended trajectory does not start where this one ends".into(),
            ));
        }
        self.direction = Direction::Composite;
        self.predictor_calls += other.predictor_calls;
        self.states.extend(other.states.into_iter().skip(1));
        Ok(())
    }

    /// Checks the level-succession invariant for the recorded direction.
    pub fn levels_consistent(&self) -> bool {
        let steps = self
            .states
            .windows(2)
            .map(|w| w[1].t as i64 - w[0].t as i64);
        match self.direction {
            Direction::Inverting => steps.clone().all(|d| d == 1),
            Direction::Denoising => steps.clone().all(|d| d == -1),
            Direction::Zigzag => steps
                .enumerate()
                .all(|(i, d)| d == if i % 2 == 0 { -1 } else { 1 }),
            Direction::Composite => steps.clone().all(|d| d.abs() == 1),
        }
    }

    /// CSV with columns `step_index,t,z_0..z_{dim-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.states[0].z.len();
        let mut w = crate::report::csv_writer(out);
        let mut header = vec!["step_index".to_string(), "t".to_string()];
        header.extend((0..dim).map(|k| format!("z_{k}")));
        w.write_record(&header)?;
        for (i, s) in self.states.iter().enumerate() {
            let mut row = vec![i.to_string(), s.t.to_string()];
            row.extend(s.z.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_step_inputs(a: &[f64], eps: &[f64]) -> Result<()> {
    if a.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: eps.len(),
        });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("latent"));
    }
    if eps.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("epsilon"));
    }
    Ok(())
}

fn step_level(t: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t == 0 {
        return Err(Error::LevelOutOfRange {
            t,
            max: schedule.steps(),
        });
    }
    schedule.check_level(t)
}

/// Coefficient on `eps` of the denoising step from `t` to `t-1`; negative
/// for any decreasing schedule.
pub fn denoise_eps_coefficient(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    step_level(t, schedule)?;
    let ab_prev = schedule.alpha_bar_at(t - 1)?;
    Ok(ab_prev.sqrt() * (schedule.sigma_at(t - 1)? - schedule.sigma_at(t)?))
}

/// One deterministic DDIM sampling step `z_t -> z_{t-1}`.
pub fn ddim_denoise_step(
    z_t: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    step_level(t, schedule)?;
    check_step_inputs(z_t, eps)?;
    let ab_t = schedule.alpha_bar_at(t)?;
    let ab_prev = schedule.alpha_bar_at(t - 1)?;
    let scale = (ab_prev / ab_t).sqrt();
    let coef = ab_prev.sqrt() * (schedule.sigma_at(t - 1)? - schedule.sigma_at(t)?);
    Ok(z_t
        .iter()
        .zip(eps)
        .map(|(z, e)| scale * z + coef * e)
        .collect())
}

/// One DDIM inversion step `z_{t-1} -> z_t`.
pub fn ddim_invert_step(
    z_prev: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    step_level(t, schedule)?;
    check_step_inputs(z_prev, eps)?;
    let ab_t = schedule.alpha_bar_at(t)?;
    let ab_prev = schedule.alpha_bar_at(t - 1)?;
    let scale = (ab_t / ab_prev).sqrt();
    let coef = ab_t.sqrt() * (schedule.sigma_at(t)? - schedule.sigma_at(t - 1)?);
    Ok(z_prev
        .iter()
        .zip(eps)
        .map(|(z, e)| scale * z + coef * e)
        .collect())
}

/// Predictor paired with the schedule it runs on.
#[derive(Clone, Copy)]
pub struct Ddim<'a> {
    pub predictor: &'a dyn EpsilonPredictor,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> Ddim<'a> {
    pub fn new(predictor: &'a dyn EpsilonPredictor, schedule: &'a NoiseSchedule) -> Self {
        Self {
            predictor,
            schedule,
        }
    }

    /// Noise prediction at `(z, level t)`, guided per `guidance`.
    /// Returns `(eps, predictor evaluations)`.
    pub fn epsilon(
        &self,
        z: &[f64],
        t: usize,
        cond: &ConditionEmbedding,
        null_cond: &ConditionEmbedding,
        guidance: GuidanceConfig,
    ) -> Result<(Vec<f64>, usize)> {
        let ab = self.schedule.alpha_bar_at(t)?;
        if guidance.use_cfg {
            guided_epsilon(self.predictor, z, ab, cond, null_cond, guidance.omega)
        } else {
            Ok((self.predictor.predict(z, ab, cond)?, 1))
        }
    }

    /// One guided denoising move from `state` to level `state.t - 1`.
    pub fn denoise_once(
        &self,
        state: &LatentState,
        cond: &ConditionEmbedding,
        null_cond: &ConditionEmbedding,
        guidance: GuidanceConfig,
    ) -> Result<(LatentState, usize)> {
        step_level(state.t, self.schedule)?;
        let (eps, calls) = self.epsilon(&state.z, state.t, cond, null_cond, guidance)?;
        let z = ddim_denoise_step(&state.z, state.t, &eps, self.schedule)?;
        Ok((LatentState::new(state.t - 1, z)?, calls))
    }

    /// One guided inversion move from `state` to level `state.t + 1`,
    /// evaluating eps at the pre-step state and level.
    pub fn invert_once(
        &self,
        state: &LatentState,
        cond: &ConditionEmbedding,
        null_cond: &ConditionEmbedding,
        guidance: GuidanceConfig,
    ) -> Result<(LatentState, usize)> {
        let t = state.t + 1;
        step_level(t, self.schedule)?;
        let (eps, calls) = self.epsilon(&state.z, state.t, cond, null_cond, guidance)?;
        let z = ddim_invert_step(&state.z, t, &eps, self.schedule)?;
        Ok((LatentState::new(t, z)?, calls))
    }

    pub fn denoise_trajectory(
        &self,
        start: &LatentState,
        stop_level: usize,
        cond: &ConditionEmbedding,
        null_cond: &ConditionEmbedding,
        guidance: GuidanceConfig,
    ) -> Result<Trajectory> {
        self.schedule.check_level(start.t)?;
        if start.t <= stop_level {
            return Err(Error::LevelOrder(format!(
                "denoising needs start level {} > stop level {stop_level}",
                start.t
            )));
        }
        guidance.validate()?;
        let mut traj = Trajectory::start(Direction::Denoising, start.clone());
        while traj.last().t > stop_level {
            let (next, calls) = self.denoise_once(traj.last(), cond, null_cond, guidance)?;
            traj.predictor_calls += calls;
            traj.states.push(next);
        }
        Ok(traj)
    }

    pub fn invert_trajectory(
        &self,
        start: &LatentState,
        stop_level: usize,
        cond: &ConditionEmbedding,
        null_cond: &ConditionEmbedding,
        guidance: GuidanceConfig,
    ) -> Result<Trajectory> {
        self.schedule.check_level(stop_level)?;
        if start.t >= stop_level {
            return Err(Error::LevelOrder(format!(
                "inversion needs start level {} < stop level {stop_level}",
                start.t
            )));
        }
        guidance.validate()?;
        let mut traj = Trajectory::start(Direction::Inverting, start.clone());
        while traj.last().t < stop_level {
            let (next, calls) = self.invert_once(traj.last(), cond, null_cond, guidance)?;
            traj.predictor_calls += calls;
            traj.states.push(next);
        }
        Ok(traj)
    }
}
