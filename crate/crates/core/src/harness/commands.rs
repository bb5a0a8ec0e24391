use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_edit, mean_std, reference_trajectory, EditMetrics, MeanStd};
use crate::pivot::{locate_pivot, PivotReport};
use crate::report::{csv_writer, write_json};
use crate::stepper::{Ddim, LatentState};
use crate::zigzag::{baseline_edit, zz_edit, zz_edit_fixed_pivot, EditRun};

use super::config::{Experiment, ExperimentConfig, Method};

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let file = File::create(&path)?;
    Ok((path, BufWriter::new(file)))
}

/// One method applied to one instance. `a` is `None` for the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub instance_id: usize,
    pub method: Method,
    pub a: Option<f64>,
    pub run: EditRun,
}

fn method_variants(exp: &Experiment) -> Vec<(Method, Option<f64>)> {
    let mut out = Vec::new();
    for &m in &exp.config.methods {
        match m {
            Method::Baseline => out.push((m, None)),
            _ => out.extend(
                exp.config
                    .zigzag
                    .a_values()
                    .into_iter()
                    .map(|a| (m, Some(a))),
            ),
        }
    }
    out
}

fn run_method(
    exp: &Experiment,
    z_0: &LatentState,
    method: Method,
    a: Option<f64>,
) -> Result<EditRun> {
    let ddim = Ddim::new(&exp.model, &exp.schedule);
    let g = exp.config.guidance;
    match (method, a) {
        (Method::Baseline, _) => {
            baseline_edit(z_0, &ddim, &exp.conditions, g.omega_inv, g.omega_final)
        }
        (Method::Zzedit, Some(a)) => zz_edit(
            z_0,
            exp.grid(),
            &ddim,
            &exp.conditions,
            &exp.zigzag_config(a),
        ),
        (Method::FixedPivot(p), Some(a)) => {
            zz_edit_fixed_pivot(z_0, p, &ddim, &exp.conditions, &exp.zigzag_config(a))
        }
        _ => Err(Error::Config(format!("method {method} needs a value of a"))),
    }
}

/// All configured method variants on instance `i`, in config order.
pub fn run_instance(exp: &Experiment, i: usize) -> Result<Vec<MethodRun>> {
    let z_0 = exp.testbed.instance(i)?;
    method_variants(exp)
        .into_iter()
        .map(|(method, a)| {
            Ok(MethodRun {
                instance_id: i,
                method,
                a,
                run: run_method(exp, &z_0, method, a)?,
            })
        })
        .collect()
}

pub fn run_all(exp: &Experiment) -> Result<Vec<MethodRun>> {
    let per: Vec<Vec<MethodRun>> = (0..exp.testbed.n_instances)
        .into_par_iter()
        .map(|i| run_instance(exp, i))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn cmd_schedule(exp: &Experiment, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (path, file) = create(out_dir, "schedule.csv")?;
    let mut w = csv_writer(file);
    w.write_record(["t", "base_index", "alpha_bar"])?;
    let s = &exp.schedule;
    for t in 0..=s.steps() {
        w.write_record([
            t.to_string(),
            s.base_index()[t].to_string(),
            s.alpha_bar()[t].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePivot {
    pub instance_id: usize,
    pub report: PivotReport,
}

#[derive(Serialize)]
struct PivotFile<'a> {
    config: ExperimentConfig,
    reports: &'a [InstancePivot],
}

pub fn run_pivots(exp: &Experiment) -> Result<Vec<InstancePivot>> {
    let omega_inv = exp.config.guidance.omega_inv;
    (0..exp.testbed.n_instances)
        .into_par_iter()
        .map(|i| {
            let ddim = Ddim::new(&exp.model, &exp.schedule);
            let z_0 = exp.testbed.instance(i)?;
            let (report, _) = locate_pivot(&z_0, exp.grid(), &ddim, &exp.conditions, omega_inv)?;
            Ok(InstancePivot {
                instance_id: i,
                report,
            })
        })
        .collect()
}

/// `(level, count)` for every grid level and for `T`, in increasing level
/// order.
pub fn pivot_histogram(exp: &Experiment, reports: &[InstancePivot]) -> Vec<(usize, usize)> {
    let steps = exp.schedule.steps();
    let mut levels = exp.grid().levels(steps);
    if levels.last() != Some(&steps) {
        levels.push(steps);
    }
    levels
        .into_iter()
        .map(|t| (t, reports.iter().filter(|r| r.report.p == t).count()))
        .collect()
}

pub fn cmd_pivot(exp: &Experiment, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let reports = run_pivots(exp)?;
    let (json_path, file) = create(out_dir, "pivot_reports.json")?;
    write_json(
        file,
        &PivotFile {
            config: exp.echo(),
            reports: &reports,
        },
    )?;

    let (csv_path, file) = create(out_dir, "pivot_reports.csv")?;
    let mut w = csv_writer(file);
    w.write_record(["instance_id", "t", "resp_src", "resp_tgt", "chosen"])?;
    for r in &reports {
        for c in &r.report.candidates {
            let chosen = c.t == r.report.p && !r.report.degenerate;
            w.write_record([
                r.instance_id.to_string(),
                c.t.to_string(),
                c.resp_src.to_string(),
                c.resp_tgt.to_string(),
                u8::from(chosen).to_string(),
            ])?;
        }
    }
    w.flush()?;

    let (hist_path, file) = create(out_dir, "pivot_histogram.csv")?;
    let mut w = csv_writer(file);
    w.write_record(["p", "count"])?;
    for (t, n) in pivot_histogram(exp, &reports) {
        w.write_record([t.to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(vec![json_path, csv_path, hist_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub instance_id: usize,
    pub method: String,
    pub a: Option<f64>,
    pub pivot_report: PivotReport,
    #[serde(rename = "K")]
    pub k: usize,
    pub total_predictor_calls: usize,
    pub inversion_steps: usize,
    pub denoising_steps: usize,
    pub z_edited: LatentState,
}

impl From<&MethodRun> for EditRecord {
    fn from(m: &MethodRun) -> Self {
        Self {
            instance_id: m.instance_id,
            method: m.method.to_string(),
            a: m.a,
            pivot_report: m.run.pivot_report.clone(),
            k: m.run.k,
            total_predictor_calls: m.run.total_predictor_calls,
            inversion_steps: m.run.inversion_steps,
            denoising_steps: m.run.denoising_steps,
            z_edited: m.run.z_edited.clone(),
        }
    }
}

#[derive(Serialize)]
struct EditFile {
    config: ExperimentConfig,
    runs: Vec<EditRecord>,
}

pub fn cmd_edit(exp: &Experiment, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = run_all(exp)?;
    let (path, file) = create(out_dir, "edit_runs.json")?;
    write_json(
        file,
        &EditFile {
            config: exp.echo(),
            runs: runs.iter().map(EditRecord::from).collect(),
        },
    )?;
    Ok(vec![path])
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub instance_id: usize,
    pub method: String,
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub a: Option<f64>,
    pub omega: f64,
    pub fidelity_err: f64,
    pub recon_err: f64,
    pub target_loglik: f64,
}

/// Metrics row plus the fields only reported in aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub row: MetricsRow,
    pub metrics: EditMetrics,
    pub predictor_calls: usize,
    pub probe_calls: usize,
}

pub fn run_comparison(exp: &Experiment) -> Result<Vec<Evaluated>> {
    let omega = exp.config.guidance.omega_final.effective_omega();
    let per: Vec<Vec<Evaluated>> = (0..exp.testbed.n_instances)
        .into_par_iter()
        .map(|i| {
            let z_0 = exp.testbed.instance(i)?;
            let reference = reference_trajectory(
                &z_0.z,
                &exp.model,
                &exp.testbed.c_src,
                &exp.config.schedule,
                exp.config.reference_steps,
            )?;
            run_instance(exp, i)?
                .into_iter()
                .map(|m| {
                    let metrics =
                        evaluate_edit(&m.run, &exp.testbed, &exp.model, &exp.schedule, &reference)?;
                    Ok(Evaluated {
                        row: MetricsRow {
                            instance_id: i,
                            method: m.method.to_string(),
                            p: metrics.pivot_p,
                            k: metrics.k,
                            a: m.a,
                            omega,
                            fidelity_err: metrics.fidelity_err,
                            recon_err: metrics.recon_err,
                            target_loglik: metrics.target_loglik,
                        },
                        metrics,
                        predictor_calls: m.run.total_predictor_calls,
                        probe_calls: m.run.pivot_report.probe_calls,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub a: Option<f64>,
    pub n: usize,
    pub fidelity_err: MeanStd,
    pub recon_err: MeanStd,
    pub target_loglik: MeanStd,
    pub pivot_err: MeanStd,
    pub p: MeanStd,
    #[serde(rename = "K")]
    pub k: MeanStd,
    pub predictor_calls: MeanStd,
    pub probe_calls: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodSummary>,
}

/// Per-variant aggregates, in first-appearance order.
pub fn summarize(exp: &Experiment, rows: &[Evaluated]) -> Summary {
    let mut keys: Vec<(String, Option<f64>)> = Vec::new();
    for r in rows {
        let key = (r.row.method.clone(), r.row.a);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let methods = keys
        .into_iter()
        .map(|(method, a)| {
            let group: Vec<&Evaluated> = rows
                .iter()
                .filter(|r| r.row.method == method && r.row.a == a)
                .collect();
            let col = |f: &dyn Fn(&Evaluated) -> f64| {
                mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            MethodSummary {
                n: group.len(),
                fidelity_err: col(&|r| r.row.fidelity_err),
                recon_err: col(&|r| r.row.recon_err),
                target_loglik: col(&|r| r.row.target_loglik),
                pivot_err: col(&|r| r.metrics.pivot_err),
                p: col(&|r| r.row.p as f64),
                k: col(&|r| r.row.k as f64),
                predictor_calls: col(&|r| r.predictor_calls as f64),
                probe_calls: col(&|r| r.probe_calls as f64),
                method,
                a,
            }
        })
        .collect();
    Summary {
        config: exp.echo(),
        methods,
    }
}

pub fn cmd_compare(exp: &Experiment, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = run_comparison(exp)?;
    let (csv_path, file) = create(out_dir, "metrics.csv")?;
    let mut w = csv_writer(file);
    for r in &rows {
        w.serialize(&r.row)?;
    }
    w.flush()?;
    let (json_path, file) = create(out_dir, "summary.json")?;
    write_json(file, &summarize(exp, &rows))?;
    Ok(vec![csv_path, json_path])
}

pub fn cmd_trace(exp: &Experiment, out_dir: &Path, instance: usize) -> Result<Vec<PathBuf>> {
    if instance >= exp.testbed.n_instances {
        return Err(Error::InvalidParameter(format!(
            "instance {instance} outside [0, {})",
            exp.testbed.n_instances
        )));
    }
    let z_0 = exp.testbed.instance(instance)?;
    let a = exp.config.zigzag.a_values()[0];
    let mut paths = Vec::new();
    for (name, method, a) in [
        ("trace_baseline.csv", Method::Baseline, None),
        ("trace_zzedit.csv", Method::Zzedit, Some(a)),
    ] {
        let run = run_method(exp, &z_0, method, a)?;
        let (path, file) = create(out_dir, name)?;
        run.trajectory.write_csv(file)?;
        paths.push(path);
    }
    Ok(paths)
}
