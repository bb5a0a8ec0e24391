//! Pivot location on the inversion trajectory.
//!
//! At a candidate level `t` the latent `z_t` is denoised one step under the
//! source, target and null conditions. The responses are the distances of
//! the source and target results from the null result; the pivot is the
//! first candidate where the target response strictly exceeds the source
//! response.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{ConditionEmbedding, EpsilonPredictor};
use crate::schedule::NoiseSchedule;
use crate::stepper::{ddim_denoise_step, Ddim, GuidanceConfig, LatentState, Trajectory};

/// Source, target and null prompts of an edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    pub src: ConditionEmbedding,
    pub tgt: ConditionEmbedding,
    pub null: ConditionEmbedding,
}

impl Conditions {
    pub fn new(src: ConditionEmbedding, tgt: ConditionEmbedding, null: ConditionEmbedding) -> Self {
        Self { src, tgt, null }
    }
}

/// Candidate pivot levels as fractions of `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PivotGrid {
    fractions: Vec<f64>,
}

impl PivotGrid {
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        if fractions.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if fractions
            .iter()
            .any(|f| !(f.is_finite() && *f > 0.0 && *f <= 1.0))
        {
            return Err(Error::InvalidGrid(format!(
                "fractions must lie in (0, 1]: {fractions:?}"
            )));
        }
        if fractions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(
                "fractions must be strictly increasing".into(),
            ));
        }
        Ok(Self { fractions })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Candidate levels `round(f * T)` (half away from zero), deduplicated;
    /// levels that round to 0 are lifted to 1.
    pub fn levels(&self, steps: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(self.fractions.len());
        for f in &self.fractions {
            let level = ((f * steps as f64).round() as usize).max(1);
            if out.last() != Some(&level) {
                out.push(level);
            }
        }
        out
    }
}

impl Default for PivotGrid {
    fn default() -> Self {
        Self {
            fractions: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        }
    }
}

impl TryFrom<Vec<f64>> for PivotGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PivotGrid> for Vec<f64> {
    fn from(g: PivotGrid) -> Self {
        g.fractions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PivotCandidate {
    pub t: usize,
    pub resp_src: f64,
    pub resp_tgt: f64,
}

impl PivotCandidate {
    pub fn satisfied(&self) -> bool {
        self.resp_tgt > self.resp_src
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotReport {
    pub candidates: Vec<PivotCandidate>,
    pub p: usize,
    pub probe_calls: usize,
    pub degenerate: bool,
}

impl PivotReport {
    /// Report for a pivot chosen without probing.
    pub fn fixed(p: usize, degenerate: bool) -> Self {
        Self {
            candidates: Vec::new(),
            p,
            probe_calls: 0,
            degenerate,
        }
    }

    /// CSV rows `t,resp_src,resp_tgt,chosen`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = crate::report::csv_writer(out);
        w.write_record(["t", "resp_src", "resp_tgt", "chosen"])?;
        for c in &self.candidates {
            let chosen = !self.degenerate && c.t == self.p;
            w.write_record([
                c.t.to_string(),
                c.resp_src.to_string(),
                c.resp_tgt.to_string(),
                u8::from(chosen).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Response levels `(‖ẑ_src − z̄_null‖, ‖z̃_tgt − z̄_null‖)` of one-step
/// denoisings of `z_t`. Always three predictor calls.
pub fn probe_responses(
    z_t: &LatentState,
    predictor: &dyn EpsilonPredictor,
    conditions: &Conditions,
    schedule: &NoiseSchedule,
) -> Result<(f64, f64)> {
    if z_t.t == 0 {
        return Err(Error::LevelOutOfRange {
            t: 0,
            max: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar_at(z_t.t)?;
    let step = |cond: &ConditionEmbedding| -> Result<Vec<f64>> {
        let eps = predictor.predict(&z_t.z, ab, cond)?;
        ddim_denoise_step(&z_t.z, z_t.t, &eps, schedule)
    };
    let from_src = step(&conditions.src)?;
    let from_tgt = step(&conditions.tgt)?;
    let anchor = step(&conditions.null)?;
    Ok((distance(&from_src, &anchor), distance(&from_tgt, &anchor)))
}

/// Inverts `z_0` under the source condition, probing at each grid level and
/// stopping at the first level whose target response exceeds the source
/// response. Falls through to `T` (degenerate) when none qualifies.
///
/// Returns the report and the inversion trajectory up to the pivot. Probe
/// evaluations are tallied in the report, not in the trajectory.
pub fn locate_pivot(
    z_0: &LatentState,
    grid: &PivotGrid,
    ddim: &Ddim<'_>,
    conditions: &Conditions,
    guidance_inv: GuidanceConfig,
) -> Result<(PivotReport, Trajectory)> {
    if z_0.t != 0 {
        return Err(Error::LevelOrder(format!(
            "pivot search starts at level 0, got {}",
            z_0.t
        )));
    }
    let steps = ddim.schedule.steps();
    let mut traj = Trajectory::start(crate::stepper::Direction::Inverting, z_0.clone());
    let mut candidates = Vec::new();
    for level in grid.levels(steps) {
        while traj.last().t < level {
            let (next, calls) =
                ddim.invert_once(traj.last(), &conditions.src, &conditions.null, guidance_inv)?;
            traj.predictor_calls += calls;
            traj.states.push(next);
        }
        let (resp_src, resp_tgt) =
            probe_responses(traj.last(), ddim.predictor, conditions, ddim.schedule)?;
        let cand = PivotCandidate {
            t: level,
            resp_src,
            resp_tgt,
        };
        candidates.push(cand);
        if cand.satisfied() {
            let probe_calls = 3 * candidates.len();
            return Ok((
                PivotReport {
                    candidates,
                    p: level,
                    probe_calls,
                    degenerate: false,
                },
                traj,
            ));
        }
    }
    while traj.last().t < steps {
        let (next, calls) =
            ddim.invert_once(traj.last(), &conditions.src, &conditions.null, guidance_inv)?;
        traj.predictor_calls += calls;
        traj.states.push(next);
    }
    let probe_calls = 3 * candidates.len();
    Ok((
        PivotReport {
            candidates,
            p: steps,
            probe_calls,
            degenerate: true,
        },
        traj,
    ))
}
