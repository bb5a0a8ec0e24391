//! ZigZag editing and the inversion-then-editing baseline.
//!
//! A union at pivot level `p` is one target-conditioned denoising step
//! `p -> p-1` followed by one source-conditioned inversion step `p-1 -> p`.
//! Composing the two steps collapses to
//!
//! ```text
//! z~_{p-1}^{k+1} = z_{p-1}^k + sqrt(abar_{p-1}) (sigma_{p-1} - sigma_p) (eps^p - eps^{p-1})
//! ```
//!
//! which [`zigzag_combined_step`] evaluates directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pivot::{locate_pivot, Conditions, PivotGrid, PivotReport};
use crate::schedule::NoiseSchedule;
use crate::stepper::{
    denoise_eps_coefficient, Ddim, Direction, GuidanceConfig, LatentState, Trajectory,
};

pub const DEFAULT_FINAL_OMEGA: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZigZagConfig {
    /// Fraction of the remaining `T - p` steps spent on unions.
    pub a: f64,
    pub omega_zz: GuidanceConfig,
    pub omega_inv: GuidanceConfig,
    pub omega_final: GuidanceConfig,
}

impl Default for ZigZagConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            omega_zz: GuidanceConfig::plain(),
            omega_inv: GuidanceConfig::plain(),
            omega_final: GuidanceConfig::cfg(DEFAULT_FINAL_OMEGA),
        }
    }
}

impl ZigZagConfig {
    pub fn with_a(mut self, a: f64) -> Self {
        self.a = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::InvalidParameter(format!(
                "a must lie in [0, 1], got {}",
                self.a
            )));
        }
        self.omega_zz.validate()?;
        self.omega_inv.validate()?;
        self.omega_final.validate()
    }
}

/// Output of one editing pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRun {
    pub pivot_report: PivotReport,
    #[serde(rename = "K")]
    pub k: usize,
    /// Inversion, ZigZag and final denoising segments, concatenated.
    pub trajectory: Trajectory,
    pub z_edited: LatentState,
    /// Predictor evaluations excluding pivot probes.
    pub total_predictor_calls: usize,
    /// Moves toward higher noise (one guided evaluation each).
    pub inversion_steps: usize,
    /// Moves toward the clean level (one guided evaluation each).
    pub denoising_steps: usize,
}

impl EditRun {
    fn assemble(pivot_report: PivotReport, k: usize, trajectory: Trajectory) -> Self {
        let (mut up, mut down) = (0, 0);
        for w in trajectory.states.windows(2) {
            if w[1].t > w[0].t {
                up += 1;
            } else {
                down += 1;
            }
        }
        Self {
            pivot_report,
            k,
            z_edited: trajectory.last().clone(),
            total_predictor_calls: trajectory.predictor_calls,
            inversion_steps: up,
            denoising_steps: down,
            trajectory,
        }
    }

    /// Pivot probes plus movement evaluations.
    pub fn calls_including_probes(&self) -> usize {
        self.total_predictor_calls + self.pivot_report.probe_calls
    }
}

/// Number of unions `K = floor(a (T - p) + 1/2)`.
pub fn compute_k(a: f64, steps: usize, p: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidParameter(format!(
            "a must lie in [0, 1], got {a}"
        )));
    }
    if p > steps {
        return Err(Error::LevelOutOfRange { t: p, max: steps });
    }
    Ok((a * (steps - p) as f64 + 0.5).floor() as usize)
}

/// `z_{p-1} + c_p (eps_p - eps_prev)` with `c_p` the denoising coefficient
/// of level `p = z_prev.t + 1`.
pub fn zigzag_combined_step(
    z_prev: &LatentState,
    eps_p: &[f64],
    eps_prev: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let p = z_prev.t + 1;
    let coef = denoise_eps_coefficient(p, schedule)?;
    if eps_p.len() != z_prev.z.len() || eps_prev.len() != z_prev.z.len() {
        return Err(Error::DimensionMismatch {
            expected: z_prev.z.len(),
            got: if eps_p.len() != z_prev.z.len() {
                eps_p.len()
            } else {
                eps_prev.len()
            },
        });
    }
    Ok(z_prev
        .z
        .iter()
        .zip(eps_p.iter().zip(eps_prev))
        .map(|(z, (ep, eq))| z + coef * (ep - eq))
        .collect())
}

/// One union: denoise `p -> p-1` under the target, invert back under the
/// source. Returns the intermediate and final states and the call count.
pub fn zigzag_union(
    z_p: &LatentState,
    ddim: &Ddim<'_>,
    conditions: &Conditions,
    config: &ZigZagConfig,
) -> Result<(LatentState, LatentState, usize)> {
    if z_p.t == 0 {
        return Err(Error::LevelOrder("ZigZag union needs p >= 1".into()));
    }
    let (down, c1) = ddim.denoise_once(z_p, &conditions.tgt, &conditions.null, config.omega_zz)?;
    let (up, c2) = ddim.invert_once(&down, &conditions.src, &conditions.null, config.omega_inv)?;
    Ok((down, up, c1 + c2))
}

/// `K` successive unions from `z_p`. The trajectory holds the start state and
/// all `2K` intermediate states.
pub fn zigzag_process(
    z_p: &LatentState,
    k: usize,
    ddim: &Ddim<'_>,
    conditions: &Conditions,
    config: &ZigZagConfig,
) -> Result<(LatentState, Trajectory)> {
    if k > 0 && z_p.t == 0 {
        return Err(Error::LevelOrder("ZigZag with K > 0 needs p >= 1".into()));
    }
    let mut traj = Trajectory::start(Direction::Zigzag, z_p.clone());
    for _ in 0..k {
        let (down, up, calls) = zigzag_union(traj.last(), ddim, conditions, config)?;
        traj.predictor_calls += calls;
        traj.states.push(down);
        traj.states.push(up);
    }
    Ok((traj.last().clone(), traj))
}

/// ZigZag from a known pivot trajectory, then the final target-guided
/// denoising to level 0.
fn finish_edit(
    pivot_report: PivotReport,
    inversion: Trajectory,
    ddim: &Ddim<'_>,
    conditions: &Conditions,
    config: &ZigZagConfig,
) -> Result<EditRun> {
    let p = inversion.last().t;
    let k = compute_k(config.a, ddim.schedule.steps(), p)?;
    let mut full = inversion;
    let (z_pk, zz) = zigzag_process(full.last(), k, ddim, conditions, config)?;
    full.extend(zz)?;
    if p > 0 {
        let fin = ddim.denoise_trajectory(
            &z_pk,
            0,
            &conditions.tgt,
            &conditions.null,
            config.omega_final,
        )?;
        full.extend(fin)?;
    }
    full.direction = Direction::Composite;
    Ok(EditRun::assemble(pivot_report, k, full))
}

/// Pivot search, ZigZag process and final denoising.
pub fn zz_edit(
    z_0: &LatentState,
    grid: &PivotGrid,
    ddim: &Ddim<'_>,
    conditions: &Conditions,
    config: &ZigZagConfig,
) -> Result<EditRun> {
    config.validate()?;
    let (report, inversion) = locate_pivot(z_0, grid, ddim, conditions, config.omega_inv)?;
    finish_edit(report, inversion, ddim, conditions, config)
}

/// ZigZag editing from a fixed pivot level `p` (no probing).
pub fn zz_edit_fixed_pivot(
    z_0: &LatentState,
    p: usize,
    ddim: &Ddim<'_>,
    conditions: &Conditions,
    config: &ZigZagConfig,
) -> Result<EditRun> {
    config.validate()?;
    if z_0.t != 0 {
        return Err(Error::LevelOrder(format!(
            "edit starts at level 0, got {}",
            z_0.t
        )));
    }
    ddim.schedule.check_level(p)?;
    let inversion = if p == 0 {
        Trajectory::start(Direction::Inverting, z_0.clone())
    } else {
        ddim.invert_trajectory(z_0, p, &conditions.src, &conditions.null, config.omega_inv)?
    };
    let steps = ddim.schedule.steps();
    finish_edit(
        PivotReport::fixed(p, p == steps),
        inversion,
        ddim,
        conditions,
        config,
    )
}

/// `T`-step inversion under the source, `T`-step denoising under the target.
pub fn baseline_edit(
    z_0: &LatentState,
    ddim: &Ddim<'_>,
    conditions: &Conditions,
    omega_inv: GuidanceConfig,
    omega_final: GuidanceConfig,
) -> Result<EditRun> {
    if z_0.t != 0 {
        return Err(Error::LevelOrder(format!(
            "edit starts at level 0, got {}",
            z_0.t
        )));
    }
    let steps = ddim.schedule.steps();
    let mut full =
        ddim.invert_trajectory(z_0, steps, &conditions.src, &conditions.null, omega_inv)?;
    let fin = ddim.denoise_trajectory(
        full.last(),
        0,
        &conditions.tgt,
        &conditions.null,
        omega_final,
    )?;
    full.extend(fin)?;
    Ok(EditRun::assemble(PivotReport::fixed(steps, true), 0, full))
}
