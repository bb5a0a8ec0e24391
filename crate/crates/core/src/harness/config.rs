use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{TestbedSpec, MIN_REFERENCE_STEPS};
use crate::pivot::{Conditions, PivotGrid};
use crate::predictor::{ConditionEmbedding, GmmModel, GmmModelSpec};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::stepper::GuidanceConfig;
use crate::zigzag::{ZigZagConfig, DEFAULT_FINAL_OMEGA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Zzedit,
    FixedPivot(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Baseline => write!(f, "baseline"),
            Method::Zzedit => write!(f, "zzedit"),
            Method::FixedPivot(p) => write!(f, "fixed_pivot_{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionsConfig {
    pub src: ConditionEmbedding,
    pub tgt: ConditionEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSettings {
    pub omega_inv: GuidanceConfig,
    pub omega_zz: GuidanceConfig,
    pub omega_final: GuidanceConfig,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self {
            omega_inv: GuidanceConfig::plain(),
            omega_zz: GuidanceConfig::plain(),
            omega_final: GuidanceConfig::cfg(DEFAULT_FINAL_OMEGA),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZigZagSettings {
    pub a: f64,
    pub grid: PivotGrid,
    /// When present, ZigZag methods run once per listed value instead of `a`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_sweep: Option<Vec<f64>>,
}

impl Default for ZigZagSettings {
    fn default() -> Self {
        Self {
            a: 1.0,
            grid: PivotGrid::default(),
            a_sweep: None,
        }
    }
}

impl ZigZagSettings {
    pub fn a_values(&self) -> Vec<f64> {
        self.a_sweep.clone().unwrap_or_else(|| vec![self.a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedSettings {
    pub seed: u64,
    pub n_instances: usize,
    pub background_dims: Vec<usize>,
}

impl Default for TestbedSettings {
    fn default() -> Self {
        let tb = TestbedSpec::two_component();
        Self {
            seed: tb.seed,
            n_instances: tb.n_instances,
            background_dims: tb.background_dims,
        }
    }
}

fn default_reference_steps() -> usize {
    10_000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("zzedit_out")
}

fn default_methods() -> Vec<Method> {
    vec![Method::Baseline, Method::Zzedit]
}

/// Experiment description. Every field has a default, so `{}` is a valid
/// config describing the two-component testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<GmmModelSpec>,
    /// JSON file holding the model, relative to the config file. Mutually exclusive with
    /// `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionsConfig>,
    #[serde(default)]
    pub guidance: GuidanceSettings,
    #[serde(default)]
    pub zigzag: ZigZagSettings,
    #[serde(default)]
    pub testbed: TestbedSettings,
    #[serde(default = "default_reference_steps")]
    pub reference_steps: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and loads `model_path` (resolved against the
    /// file's directory) into `model`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(rel) = &cfg.model_path {
            if cfg.model.is_some() {
                return Err(Error::Config(
                    "give either model or model_path, not both".into(),
                ));
            }
            let full = match path.parent() {
                Some(dir) if rel.is_relative() => dir.join(rel),
                _ => rel.clone(),
            };
            let text = std::fs::read_to_string(&full)
                .map_err(|e| Error::Config(format!("model_path {}: {e}", full.display())))?;
            let spec: GmmModelSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("model_path {}: {e}", full.display())))?;
            cfg.model = Some(spec);
        }
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<Experiment> {
        if self.model.is_none() && self.model_path.is_some() {
            return Err(Error::Config("model_path was not loaded".into()));
        }
        let defaults = TestbedSpec::two_component();
        let model_spec = self.model.clone().unwrap_or(defaults.model);
        let (c_src, c_tgt) = match &self.conditions {
            Some(c) => (c.src.clone(), c.tgt.clone()),
            None => (defaults.c_src, defaults.c_tgt),
        };
        let testbed = TestbedSpec {
            model: model_spec,
            c_src,
            c_tgt,
            background_dims: self.testbed.background_dims.clone(),
            seed: self.testbed.seed,
            n_instances: self.testbed.n_instances,
        };
        testbed
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let schedule = self.schedule.build()?;
        let model = GmmModel::new(testbed.model.clone())?;
        let g = self.guidance;
        for a in self.zigzag.a_values() {
            ZigZagConfig {
                a,
                omega_zz: g.omega_zz,
                omega_inv: g.omega_inv,
                omega_final: g.omega_final,
            }
            .validate()?;
        }
        if self.zigzag.a_sweep.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(Error::Config("a_sweep must not be empty".into()));
        }
        let n = self.schedule.base_resolution;
        if self.reference_steps < MIN_REFERENCE_STEPS || !self.reference_steps.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "reference_steps must be a multiple of {n} and at least {MIN_REFERENCE_STEPS}"
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        for m in &self.methods {
            if let Method::FixedPivot(p) = m {
                schedule.check_level(*p)?;
                let unions = self
                    .zigzag
                    .a_values()
                    .iter()
                    .any(|&a| a * (schedule.steps() - p) as f64 >= 0.5);
                if *p == 0 && unions {
                    return Err(Error::Config(
                        "fixed_pivot 0 admits no unions; use a = 0".into(),
                    ));
                }
            }
        }
        Ok(Experiment {
            config: self.clone(),
            conditions: testbed.conditions(),
            testbed,
            schedule,
            model,
        })
    }
}

/// Validated config with the objects it describes.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub testbed: TestbedSpec,
    pub schedule: NoiseSchedule,
    pub model: GmmModel,
    pub conditions: Conditions,
}

impl Experiment {
    pub fn zigzag_config(&self, a: f64) -> ZigZagConfig {
        let g = self.config.guidance;
        ZigZagConfig {
            a,
            omega_zz: g.omega_zz,
            omega_inv: g.omega_inv,
            omega_final: g.omega_final,
        }
    }

    pub fn grid(&self) -> &PivotGrid {
        &self.config.zigzag.grid
    }

    /// Config as run, with defaults filled in and the model inlined.
    pub fn echo(&self) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.model = Some(self.testbed.model.clone());
        c.conditions = Some(ConditionsConfig {
            src: self.testbed.c_src.clone(),
            tgt: self.testbed.c_tgt.clone(),
        });
        c
    }
}
