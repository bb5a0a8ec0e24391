//! Fidelity and editability measurements on seeded Gaussian-mixture
//! testbeds, with fine-step reference trajectories standing in for the
//! error-free latent path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pivot::Conditions;
use crate::predictor::{
    ConditionEmbedding, EpsilonPredictor, GmmComponent, GmmModel, GmmModelSpec,
};
use crate::rng::SplitMix64;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::stepper::{Ddim, GuidanceConfig, LatentState};
use crate::zigzag::EditRun;

pub const MIN_REFERENCE_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedSpec {
    pub model: GmmModelSpec,
    pub c_src: ConditionEmbedding,
    pub c_tgt: ConditionEmbedding,
    /// Coordinates that editing should leave untouched.
    pub background_dims: Vec<usize>,
    pub seed: u64,
    pub n_instances: usize,
}

impl TestbedSpec {
    /// Two three-dimensional components that differ mainly along the first
    /// coordinate; the remaining two coordinates are background. Source and
    /// target conditions are soft mixtures leaning toward opposite
    /// components.
    pub fn two_component() -> Self {
        let var = vec![1.0, 0.3, 1.5];
        Self {
            model: GmmModelSpec {
                dim: 3,
                components: vec![
                    GmmComponent {
                        mean: vec![-2.5, 0.5, -0.5],
                        var: var.clone(),
                    },
                    GmmComponent {
                        mean: vec![2.5, 0.8, -0.2],
                        var,
                    },
                ],
                null_weights: ConditionEmbedding::new(vec![0.5, 0.5]).expect("valid weights"),
            },
            c_src: ConditionEmbedding::new(vec![0.7, 0.3]).expect("valid weights"),
            c_tgt: ConditionEmbedding::new(vec![0.3, 0.7]).expect("valid weights"),
            background_dims: vec![1, 2],
            seed: 0,
            n_instances: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let k = self.model.components.len();
        for c in [&self.c_src, &self.c_tgt] {
            if c.len() != k {
                return Err(Error::InvalidCondition(format!(
                    "condition has {} weights, model has {k} components",
                    c.len()
                )));
            }
        }
        if let Some(&d) = self.background_dims.iter().find(|&&d| d >= self.model.dim) {
            return Err(Error::InvalidParameter(format!(
                "background dim {d} outside [0, {})",
                self.model.dim
            )));
        }
        if self.n_instances == 0 {
            return Err(Error::InvalidParameter(
                "n_instances must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<GmmModel> {
        self.validate()?;
        GmmModel::new(self.model.clone())
    }

    pub fn conditions(&self) -> Conditions {
        Conditions::new(
            self.c_src.clone(),
            self.c_tgt.clone(),
            self.model.null_weights.clone(),
        )
    }

    pub fn is_reconstruction(&self) -> bool {
        self.c_src == self.c_tgt
    }

    /// Clean source sample `i`, drawn from the component the source
    /// condition weights most. Depends only on `(seed, i)`.
    pub fn instance(&self, i: usize) -> Result<LatentState> {
        let comp = &self.model.components[self.c_src.dominant_component()];
        let mut rng = SplitMix64::for_instance(self.seed, i as u64);
        let z = comp
            .mean
            .iter()
            .zip(&comp.var)
            .map(|(m, v)| m + v.sqrt() * rng.next_normal())
            .collect();
        LatentState::clean(z)
    }

    pub fn instances(&self) -> Result<Vec<LatentState>> {
        (0..self.n_instances).map(|i| self.instance(i)).collect()
    }
}

/// Fine-step plain-conditional inversion of a clean latent.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    schedule: NoiseSchedule,
    states: Vec<Vec<f64>>,
}

impl ReferenceTrajectory {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("non-empty")
    }

    /// State at the fine level sharing the base index of coarse level `t`.
    pub fn at(&self, coarse: &NoiseSchedule, t: usize) -> Result<&[f64]> {
        let fine = self.schedule.params();
        let base = coarse.params();
        let same_betas = base.beta_start == fine.beta_start && base.beta_end == fine.beta_end;
        let n = base.base_resolution;
        if !same_betas || n == 0 || !fine.steps.is_multiple_of(n) {
            return Err(Error::InvalidSchedule(format!(
                "coarse schedule (base {n}) does not share the reference base grid"
            )));
        }
        let j = coarse.base_index_at(t)? * (fine.steps / n);
        Ok(&self.states[j])
    }
}

/// Inverts `z_0` over `steps` fine levels refining `base`, with plain
/// conditional guidance under `cond`.
pub fn reference_trajectory(
    z_0: &[f64],
    predictor: &dyn EpsilonPredictor,
    cond: &ConditionEmbedding,
    base: &ScheduleParams,
    steps: usize,
) -> Result<ReferenceTrajectory> {
    if steps < MIN_REFERENCE_STEPS {
        return Err(Error::InvalidSchedule(format!(
            "reference needs at least {MIN_REFERENCE_STEPS} steps, got {steps}"
        )));
    }
    let schedule = NoiseSchedule::refined(base, steps)?;
    let traj = Ddim::new(predictor, &schedule).invert_trajectory(
        &LatentState::clean(z_0.to_vec())?,
        steps,
        cond,
        cond,
        GuidanceConfig::plain(),
    )?;
    let states = traj.states.into_iter().map(|s| s.z).collect();
    Ok(ReferenceTrajectory { schedule, states })
}

/// Euclidean distance restricted to `dims`.
pub fn fidelity_error(z: &[f64], z_ref: &[f64], dims: &[usize]) -> Result<f64> {
    if z.len() != z_ref.len() {
        return Err(Error::DimensionMismatch {
            expected: z_ref.len(),
            got: z.len(),
        });
    }
    let mut acc = 0.0;
    for &d in dims {
        let diff = z
            .get(d)
            .ok_or_else(|| Error::InvalidParameter(format!("dim {d} outside [0, {})", z.len())))?
            - z_ref[d];
        acc += diff * diff;
    }
    Ok(acc.sqrt())
}

/// Clean-data log density under the target condition.
pub fn target_alignment(
    z_prime: &[f64],
    model: &GmmModel,
    c_tgt: &ConditionEmbedding,
) -> Result<f64> {
    model.log_density(z_prime, 1.0, c_tgt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub fidelity_err: f64,
    pub recon_err: f64,
    pub target_loglik: f64,
    /// Distance between the latent handed to the final denoising and the
    /// reference state at the same level.
    pub pivot_err: f64,
    pub pivot_p: usize,
    #[serde(rename = "K")]
    pub k: usize,
}

pub fn evaluate_edit(
    run: &EditRun,
    testbed: &TestbedSpec,
    model: &GmmModel,
    schedule: &NoiseSchedule,
    reference: &ReferenceTrajectory,
) -> Result<EditMetrics> {
    let z = &run.z_edited.z;
    let z_0 = reference.states()[0].as_slice();
    let fidelity_err = fidelity_error(z, z_0, &testbed.background_dims)?;
    let recon_err = if testbed.is_reconstruction() {
        let all: Vec<usize> = (0..z.len()).collect();
        fidelity_error(z, z_0, &all)?
    } else {
        fidelity_err
    };
    let p = run.pivot_report.p;
    let handoff = run
        .trajectory
        .states
        .get(p + 2 * run.k)
        .ok_or_else(|| Error::InvalidParameter("trajectory shorter than p + 2K".into()))?;
    if handoff.t != p {
        return Err(Error::LevelOrder(format!(
            "expected level {p} at index {}, found {}",
            p + 2 * run.k,
            handoff.t
        )));
    }
    let all: Vec<usize> = (0..z.len()).collect();
    let pivot_err = fidelity_error(&handoff.z, reference.at(schedule, p)?, &all)?;
    let m = EditMetrics {
        fidelity_err,
        recon_err,
        target_loglik: target_alignment(z, model, &testbed.c_tgt)?,
        pivot_err,
        pivot_p: p,
        k: run.k,
    };
    for (name, v) in [
        ("fidelity_err", m.fidelity_err),
        ("recon_err", m.recon_err),
        ("target_loglik", m.target_loglik),
        ("pivot_err", m.pivot_err),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
        n,
    }
}

/// Spread of target alignment across baseline edits run on the fine
/// schedule `base` itself with `omega_final`. Used as the slack when comparing
/// mean target alignment between methods.
pub fn calibrate_alignment_slack(
    testbed: &TestbedSpec,
    base: &ScheduleParams,
    omega_final: GuidanceConfig,
) -> Result<MeanStd> {
    let model = testbed.build_model()?;
    let fine = NoiseSchedule::refined(base, base.base_resolution)?;
    let ddim = Ddim::new(&model, &fine);
    let conds = testbed.conditions();
    let mut values = Vec::with_capacity(testbed.n_instances);
    for i in 0..testbed.n_instances {
        let run = crate::zigzag::baseline_edit(
            &testbed.instance(i)?,
            &ddim,
            &conds,
            GuidanceConfig::plain(),
            omega_final,
        )?;
        values.push(target_alignment(&run.z_edited.z, &model, &testbed.c_tgt)?);
    }
    Ok(mean_std(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pivot::PivotGrid;
    use crate::predictor::constant_epsilon;
    use crate::zigzag::{baseline_edit, zz_edit, ZigZagConfig};

    fn base() -> ScheduleParams {
        ScheduleParams::default()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn zero_predictor_reference_is_rescaled_input() {
        let zero = constant_epsilon(vec![0.0; 2]);
        let c = ConditionEmbedding::new(vec![1.0]).unwrap();
        for steps in [1000, 3000] {
            let r = reference_trajectory(&[1.5, -0.5], &zero, &c, &base(), steps).unwrap();
            let s = r.schedule();
            for t in [0, 1, steps / 2, steps] {
                let k = s.alpha_bar()[t].sqrt();
                let want = [1.5 * k, -0.5 * k];
                assert!(dist(&r.states()[t], &want) <= 1e-12 * (1.0 + dist(&want, &[0.0, 0.0])));
            }
        }
        assert!(reference_trajectory(&[0.0], &zero, &c, &base(), 999).is_err());
        assert!(reference_trajectory(&[0.0], &zero, &c, &base(), 1500).is_err());
    }

    #[test]
    fn reference_lookup_matches_base_levels() {
        let zero = constant_epsilon(vec![0.0]);
        let c = ConditionEmbedding::new(vec![1.0]).unwrap();
        let r = reference_trajectory(&[1.0], &zero, &c, &base(), 2000).unwrap();
        let coarse = NoiseSchedule::linear(50, 1000, 1e-4, 0.02).unwrap();
        for t in [0, 1, 25, 50] {
            let got = r.at(&coarse, t).unwrap()[0];
            assert!((got - coarse.alpha_bar()[t].sqrt()).abs() < 1e-12);
        }
        let other = NoiseSchedule::linear(50, 1000, 1e-4, 0.03).unwrap();
        assert!(r.at(&other, 10).is_err());
    }

    #[test]
    fn reference_matches_affine_flow() {
        // one Gaussian: x = z / sqrt(abar) moves as m + (x0 - m) sqrt((v + s^2) / v)
        let spec = GmmModelSpec::single(vec![1.5, -1.0], vec![0.25, 2.0]).unwrap();
        let m = GmmModel::new(spec).unwrap();
        let c = ConditionEmbedding::new(vec![1.0]).unwrap();
        let z0 = [1.1, 0.3];
        let r = reference_trajectory(&z0, &m, &c, &base(), 10_000).unwrap();
        let ab = r.schedule().alpha_bar()[10_000];
        let s2 = 1.0 / ab - 1.0;
        let exact: Vec<f64> = [(1.5, 0.25), (-1.0, 2.0)]
            .iter()
            .zip(&z0)
            .map(|(&(mu, v), x0)| ab.sqrt() * (mu + (x0 - mu) * ((v + s2) / v).sqrt()))
            .collect();
        let err = dist(r.endpoint(), &exact) / dist(&exact, &[0.0, 0.0]);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn reference_self_consistency() {
        let tb = TestbedSpec::two_component();
        let model = tb.build_model().unwrap();
        let coarse = NoiseSchedule::linear(50, 1000, 1e-4, 0.02).unwrap();
        let ddim = Ddim::new(&model, &coarse);
        for i in 0..3 {
            let z0 = tb.instance(i).unwrap();
            let r1 = reference_trajectory(&z0.z, &model, &tb.c_src, &base(), 10_000).unwrap();
            let r2 = reference_trajectory(&z0.z, &model, &tb.c_src, &base(), 20_000).unwrap();
            let c = ddim
                .invert_trajectory(&z0, 50, &tb.c_src, &tb.c_src, GuidanceConfig::plain())
                .unwrap();
            let fine_gap = dist(r1.endpoint(), r2.endpoint());
            let coarse_gap = dist(&c.last().z, r1.endpoint());
            assert!(fine_gap * 10.0 <= coarse_gap, "{fine_gap} vs {coarse_gap}");
        }
    }

    #[test]
    fn fidelity_error_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(fidelity_error(&a, &a, &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(fidelity_error(&a, &[0.0; 3], &[]).unwrap(), 0.0);
        assert_eq!(
            fidelity_error(&a, &[1.0, 0.0, -1.0], &[1, 2]).unwrap(),
            20.0f64.sqrt()
        );
        assert_eq!(
            fidelity_error(&a, &[0.0; 3], &[0, 1, 2]).unwrap(),
            14.0f64.sqrt()
        );
        assert!(fidelity_error(&a, &[0.0; 2], &[0]).is_err());
        assert!(fidelity_error(&a, &[0.0; 3], &[3]).is_err());
    }

    #[test]
    fn target_alignment_cases() {
        let m = GmmModel::new(GmmModelSpec::single(vec![0.7], vec![1.0]).unwrap()).unwrap();
        let c = ConditionEmbedding::new(vec![1.0]).unwrap();
        let v = target_alignment(&[0.7], &m, &c).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);

        let tb = TestbedSpec::two_component();
        let m = tb.build_model().unwrap();
        let z = [0.3, 0.1, -1.0];
        let lone = ConditionEmbedding::new(vec![1.0, 0.0]).unwrap();
        let first = GmmModel::new(GmmModelSpec {
            dim: 3,
            components: vec![tb.model.components[0].clone()],
            null_weights: ConditionEmbedding::new(vec![1.0]).unwrap(),
        })
        .unwrap();
        let a = target_alignment(&z, &m, &lone).unwrap();
        let b = target_alignment(&z, &first, &ConditionEmbedding::new(vec![1.0]).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-14);

        let gauss = |c: &GmmComponent| -> f64 {
            c.mean
                .iter()
                .zip(&c.var)
                .zip(&z)
                .map(|((mu, v), x)| {
                    (-(x - mu) * (x - mu) / (2.0 * v)).exp()
                        / (2.0 * std::f64::consts::PI * v).sqrt()
                })
                .product()
        };
        let w = tb.c_tgt.weights();
        let direct =
            (w[0] * gauss(&tb.model.components[0]) + w[1] * gauss(&tb.model.components[1])).ln();
        let got = target_alignment(&z, &m, &tb.c_tgt).unwrap();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn testbed_validation_and_sampling() {
        let tb = TestbedSpec::two_component();
        tb.validate().unwrap();
        assert_eq!(tb.instance(3).unwrap(), tb.instance(3).unwrap());
        assert_ne!(tb.instance(3).unwrap(), tb.instance(4).unwrap());
        let reseeded = TestbedSpec {
            seed: 1,
            ..tb.clone()
        };
        assert_ne!(tb.instance(3).unwrap(), reseeded.instance(3).unwrap());
        // samples sit near the dominant source component
        let zs = TestbedSpec {
            n_instances: 2000,
            ..tb.clone()
        }
        .instances()
        .unwrap();
        let m0 = zs.iter().map(|s| s.z[0]).sum::<f64>() / zs.len() as f64;
        assert!((m0 + 2.5).abs() < 0.1);

        assert!(TestbedSpec {
            background_dims: vec![3],
            ..tb.clone()
        }
        .validate()
        .is_err());
        assert!(TestbedSpec {
            n_instances: 0,
            ..tb.clone()
        }
        .validate()
        .is_err());
        let bad = TestbedSpec {
            c_tgt: ConditionEmbedding::new(vec![1.0]).unwrap(),
            ..tb.clone()
        };
        assert!(bad.validate().is_err());

        let json = serde_json::to_string(&tb).unwrap();
        assert_eq!(serde_json::from_str::<TestbedSpec>(&json).unwrap(), tb);
    }

    #[test]
    fn zero_predictor_reconstruction_has_no_error() {
        let zero = constant_epsilon(vec![0.0; 3]);
        let mut tb = TestbedSpec::two_component();
        tb.c_tgt = tb.c_src.clone();
        let model = tb.build_model().unwrap();
        let s = NoiseSchedule::linear(50, 1000, 1e-4, 0.02).unwrap();
        let ddim = Ddim::new(&zero, &s);
        let z0 = tb.instance(0).unwrap();
        let run = baseline_edit(
            &z0,
            &ddim,
            &tb.conditions(),
            GuidanceConfig::plain(),
            GuidanceConfig::plain(),
        )
        .unwrap();
        let r = reference_trajectory(&z0.z, &zero, &tb.c_src, &base(), 1000).unwrap();
        let m = evaluate_edit(&run, &tb, &model, &s, &r).unwrap();
        assert!(m.recon_err < 1e-14);
        assert!(m.fidelity_err < 1e-14);
        assert!(m.pivot_err < 1e-13);
        assert_eq!(m.pivot_p, 50);
        assert_eq!(m.k, 0);
    }

    #[test]
    fn reconstruction_error_shrinks_with_steps() {
        let mut tb = TestbedSpec::two_component();
        tb.c_tgt = tb.c_src.clone();
        let model = tb.build_model().unwrap();
        let z0 = tb.instance(1).unwrap();
        let r = reference_trajectory(&z0.z, &model, &tb.c_src, &base(), 1000).unwrap();
        let mut errs = vec![];
        for steps in [50, 200] {
            let s = NoiseSchedule::linear(steps, 1000, 1e-4, 0.02).unwrap();
            let ddim = Ddim::new(&model, &s);
            let run = baseline_edit(
                &z0,
                &ddim,
                &tb.conditions(),
                GuidanceConfig::plain(),
                GuidanceConfig::plain(),
            )
            .unwrap();
            errs.push(evaluate_edit(&run, &tb, &model, &s, &r).unwrap().recon_err);
        }
        assert!(errs[1] < errs[0] / 2.0, "{errs:?}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let tb = TestbedSpec::two_component();
        let model = tb.build_model().unwrap();
        let s = NoiseSchedule::linear(50, 1000, 1e-4, 0.02).unwrap();
        let ddim = Ddim::new(&model, &s);
        let once = || {
            let z0 = tb.instance(7).unwrap();
            let run = zz_edit(
                &z0,
                &PivotGrid::default(),
                &ddim,
                &tb.conditions(),
                &ZigZagConfig::default(),
            )
            .unwrap();
            let r = reference_trajectory(&z0.z, &model, &tb.c_src, &base(), 1000).unwrap();
            evaluate_edit(&run, &tb, &model, &s, &r).unwrap()
        };
        let (a, b) = (once(), once());
        assert_eq!(a.fidelity_err.to_bits(), b.fidelity_err.to_bits());
        assert_eq!(a.target_loglik.to_bits(), b.target_loglik.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn mean_std_values() {
        let m = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - 1.25f64.sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).mean.is_nan());
    }
}
