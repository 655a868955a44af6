use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use miranda_core::eval::{
    aggregate, emit_scatter, metrics, read_cells, render_report, write_cells, MetricRow, Metrics, ScatterPoint,
};
use miranda_core::synth::{split, write_csv, Dataset, Partition, ShiftStats, SplitSpec};
use miranda_core::train::{fit, EpochRecord, FitData, FittedModel, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{fit_layout, ExperimentConfig, RunSpec, TargetPool};

pub const CELLS_FILE: &str = "cells.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const FAILURES_FILE: &str = "failures.txt";
pub const EXPERIMENT_FILE: &str = "experiment.toml";

/// Species labels used in reports: the synthetic species names when
/// available, `species_<k>` otherwise.
pub fn species_names(cfg: &ExperimentConfig, data: &Dataset) -> Vec<String> {
    match &cfg.dataset.synthetic {
        Some(d) if d.species.len() == data.species => d.species.iter().map(|s| s.name.clone()).collect(),
        _ => (1..=data.species).map(|k| format!("species_{k}")).collect(),
    }
}

/// Dataset and partition of an experiment.
pub fn load_split(cfg: &ExperimentConfig) -> Result<(Dataset, Partition)> {
    let data = cfg.dataset.load()?;
    let part = split(&data, &cfg.split).with_context(|| format!("split `{}`", cfg.split.name()))?;
    Ok((data, part))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitShift {
    pub name: &'static str,
    pub size: usize,
    /// Mean temperature and mean observed date relative to train.
    pub shift: Option<ShiftStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub sites: usize,
    pub first_year: i32,
    pub last_year: i32,
    pub rows: usize,
    pub labels: Vec<(String, usize)>,
    pub splits: Vec<SplitShift>,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {} site-years to {}", self.rows, self.path.display())?;
        writeln!(f, "sites: {}, years: {}-{}", self.sites, self.first_year, self.last_year)?;
        for (name, n) in &self.labels {
            writeln!(f, "labels {name}: {n}")?;
        }
        for s in &self.splits {
            match &s.shift {
                Some(d) => writeln!(
                    f,
                    "{:<5} n={:<5} dT={:+.2} C  dDate={:+.2} d",
                    s.name, s.size, d.delta_temperature, d.delta_date
                )?,
                None => writeln!(f, "{:<5} n={}", s.name, s.size)?,
            }
        }
        Ok(())
    }
}

/// Writes the configured dataset as CSV and summarizes it, including the
/// shift of the validation and test splits relative to train.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateSummary> {
    let (data, part) = load_split(cfg)?;
    write_csv(&data, out).with_context(|| format!("writing {}", out.display()))?;
    let mut sites: Vec<u32> = data.records.iter().map(|r| r.site_id).collect();
    sites.sort_unstable();
    sites.dedup();
    let years = data.records.iter().map(|r| r.year);
    let labels = species_names(cfg, &data)
        .into_iter()
        .enumerate()
        .map(|(k, name)| (name, data.records.iter().filter(|r| r.labels[k].is_some()).count()))
        .collect();
    let shift_of = |idx: &[usize]| {
        let p = Partition {
            train: part.train.clone(),
            val: Vec::new(),
            test: idx.to_vec(),
        };
        ShiftStats::compute(&data, &p)
    };
    Ok(GenerateSummary {
        path: out.to_path_buf(),
        sites: sites.len(),
        first_year: years.clone().min().unwrap_or(0),
        last_year: years.max().unwrap_or(0),
        rows: data.len(),
        labels,
        splits: vec![
            SplitShift {
                name: "train",
                size: part.train.len(),
                shift: None,
            },
            SplitShift {
                name: "val",
                size: part.val.len(),
                shift: Some(shift_of(&part.val)),
            },
            SplitShift {
                name: "test",
                size: part.test.len(),
                shift: Some(shift_of(&part.test)),
            },
        ],
    })
}

/// Per-species test metrics and scatter points of a fitted model.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub species: Vec<(String, Result<Metrics, String>)>,
    pub scatter: Vec<ScatterPoint>,
}

impl Evaluation {
    pub fn rows(&self, method: &str, split: &str, seed: u64) -> Vec<MetricRow> {
        self.species
            .iter()
            .filter_map(|(name, m)| m.as_ref().ok().map(|m| MetricRow::new(method, split, name, seed, *m)))
            .collect()
    }
}

pub fn evaluate(model: &FittedModel, data: &Dataset, idx: &[usize], names: &[String]) -> Result<Evaluation> {
    let (c, t, s) = model.layout();
    if c.is_some_and(|c| c != data.channels()) || t.is_some_and(|t| t != data.days) || s != data.species {
        bail!(
            "checkpoint expects (C, T, S) = ({}, {}, {s}), data has ({}, {}, {})",
            c.map_or("-".into(), |c| c.to_string()),
            t.map_or("-".into(), |t| t.to_string()),
            data.channels(),
            data.days,
            data.species
        );
    }
    let preds = model.predict(data, idx)?;
    let mut scatter = Vec::new();
    let mut species = Vec::with_capacity(data.species);
    for (k, name) in names.iter().enumerate() {
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for (&i, p) in idx.iter().zip(&preds) {
            if let Some(y) = data.records[i].labels[k] {
                truth.push(y);
                pred.push(p[k]);
                scatter.push(ScatterPoint {
                    truth: y,
                    pred: p[k],
                    species: name.clone(),
                });
            }
        }
        species.push((name.clone(), metrics(&truth, &pred).map_err(|e| e.to_string())));
    }
    Ok(Evaluation { species, scatter })
}

/// Provenance stored in each run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub name: String,
    pub split: SplitSpec,
    pub target: TargetPool,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSummary {
    pub species: String,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub n: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub selected_epoch: usize,
    pub epochs_trained: usize,
    pub test: Vec<SpeciesSummary>,
}

#[derive(Serialize)]
struct Timing {
    wall_clock_s: f64,
}

pub fn run_dir(out: &Path, name: &str, seed: u64) -> PathBuf {
    out.join("runs").join(name).join(format!("seed_{seed}"))
}

fn write_curves(curves: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in curves {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

struct Job<'a> {
    spec: &'a RunSpec,
    seed: u64,
}

struct JobOutput {
    rows: Vec<MetricRow>,
    notes: Vec<String>,
}

fn run_one(
    cfg: &ExperimentConfig,
    job: &Job<'_>,
    data: &Dataset,
    part: &Partition,
    target: &[usize],
    names: &[String],
    out: &Path,
) -> Result<JobOutput> {
    let mut train = TrainConfig {
        seed: job.seed,
        ..job.spec.train.clone()
    };
    fit_layout(&mut train, data);
    let dir = run_dir(out, &job.spec.name, job.seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let resolved = ResolvedRun {
        name: job.spec.name.clone(),
        split: cfg.split.clone(),
        target: cfg.target,
        train,
    };
    fs::write(dir.join("config.toml"), toml::to_string(&resolved)?)?;

    let split_data = FitData {
        train: &part.train,
        val: &part.val,
        target,
    };
    let run = fit(data, split_data, &resolved.train)?;
    write_curves(&run.curves, &dir.join("metrics.csv"))?;
    run.model.save(dir.join("checkpoint.json"))?;
    let eval = evaluate(&run.model, data, &part.test, names)?;
    emit_scatter(&eval.scatter, dir.join("scatter.csv"))?;

    let summary = RunSummary {
        name: job.spec.name.clone(),
        seed: job.seed,
        selected_epoch: run.selected_epoch,
        epochs_trained: run.epochs_trained,
        test: eval
            .species
            .iter()
            .map(|(name, m)| SpeciesSummary {
                species: name.clone(),
                r2: m.as_ref().ok().map(|m| m.r2),
                rmse: m.as_ref().ok().map(|m| m.rmse),
                mae: m.as_ref().ok().map(|m| m.mae),
                n: m.as_ref().ok().map(|m| m.n),
                error: m.as_ref().err().cloned(),
            })
            .collect(),
    };
    fs::write(dir.join("summary.toml"), toml::to_string(&summary)?)?;
    fs::write(
        dir.join("timing.toml"),
        toml::to_string(&Timing {
            wall_clock_s: run.wall_clock_s,
        })?,
    )?;
    let notes = eval
        .species
        .iter()
        .filter_map(|(name, m)| m.as_ref().err().map(|e| format!("{} seed {} {name}: {e}", job.spec.name, job.seed)))
        .collect();
    Ok(JobOutput {
        rows: eval.rows(&job.spec.name, cfg.split.name(), job.seed),
        notes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub rows: Vec<MetricRow>,
    pub failures: Vec<String>,
    /// Methods none of whose seeds produced a model.
    pub failed_methods: Vec<String>,
    pub report: String,
}

/// Fits every (method, seed) pair with at most `jobs` runs in flight, then
/// writes the per-cell CSV, the aggregated report and the failure list.
pub fn run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunOutcome> {
    cfg.validate()?;
    let (data, part) = load_split(cfg)?;
    let target = cfg.target.indices(&part);
    let names = species_names(cfg, &data);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(EXPERIMENT_FILE), cfg.to_toml()?)?;

    let specs = cfg.runs();
    let work: Vec<Job<'_>> = specs
        .iter()
        .flat_map(|spec| cfg.seeds.iter().map(move |&seed| Job { spec, seed }))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<Result<JobOutput>> = pool.install(|| {
        work.par_iter()
            .map(|job| {
                log::info!("{} seed {}: start", job.spec.name, job.seed);
                run_one(cfg, job, &data, &part, &target, &names, out)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut failed_methods = Vec::new();
    for (spec_idx, spec) in specs.iter().enumerate() {
        let n = cfg.seeds.len();
        let mut ok = 0;
        for (job, res) in work[spec_idx * n..(spec_idx + 1) * n]
            .iter()
            .zip(&results[spec_idx * n..(spec_idx + 1) * n])
        {
            match res {
                Ok(o) => {
                    ok += 1;
                    rows.extend(o.rows.iter().cloned());
                    failures.extend(o.notes.iter().cloned());
                }
                Err(e) => failures.push(format!("{} seed {}: {e:#}", spec.name, job.seed)),
            }
        }
        if ok == 0 {
            failed_methods.push(spec.name.clone());
        }
    }

    write_cells(&rows, out.join(CELLS_FILE))?;
    let report = if rows.is_empty() {
        String::new()
    } else {
        render_report(&aggregate(&rows))
    };
    fs::write(out.join(REPORT_FILE), &report)?;
    let mut failure_text = failures.join("\n");
    if !failure_text.is_empty() {
        failure_text.push('\n');
    }
    fs::write(out.join(FAILURES_FILE), failure_text)?;
    Ok(RunOutcome {
        rows,
        failures,
        failed_methods,
        report,
    })
}

/// Re-aggregates the per-cell CSV of an output directory and rewrites its
/// report.
pub fn report(out: &Path) -> Result<String> {
    let path = out.join(CELLS_FILE);
    let rows = read_cells(&path).with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{}: no cells", path.display());
    }
    let text = render_report(&aggregate(&rows));
    fs::write(out.join(REPORT_FILE), &text)?;
    Ok(text)
}

/// Evaluates a checkpoint on the configured test split and writes the
/// scatter CSV.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, scatter: &Path) -> Result<Evaluation> {
    let model = FittedModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (data, part) = load_split(cfg)?;
    let names = species_names(cfg, &data);
    let result = evaluate(&model, &data, &part.test, &names)?;
    emit_scatter(&result.scatter, scatter)?;
    Ok(result)
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>8} {:>8} {:>6}", "species", "R2", "RMSE", "MAE", "n")?;
        let mut ok = Vec::new();
        for (name, m) in &self.species {
            match m {
                Ok(m) => {
                    writeln!(f, "{name:<16} {:>8.3} {:>8.3} {:>8.3} {:>6}", m.r2, m.rmse, m.mae, m.n)?;
                    ok.push(*m);
                }
                Err(e) => writeln!(f, "{name:<16} {e}")?,
            }
        }
        if !ok.is_empty() {
            let k = ok.len() as f64;
            writeln!(
                f,
                "{:<16} {:>8.3} {:>8.3} {:>8.3}",
                "mean",
                ok.iter().map(|m| m.r2).sum::<f64>() / k,
                ok.iter().map(|m| m.rmse).sum::<f64>() / k,
                ok.iter().map(|m| m.mae).sum::<f64>() / k
            )?;
        }
        Ok(())
    }
}
