//! One-axis ablation sweeps over cells x seeds, with trend verdicts.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::plot::{plot, PlotKind};
use super::{coverage_csv, plan, run, ExperimentConfig, RunRecord, Stage, StageError, COVERAGE_FILE};
use crate::grrt::save_tree;

/// Spearman threshold for a monotone-trend verdict.
pub const MONOTONE_RHO: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    TreeSize,
    KMax,
    Alpha,
    ObsMask,
    ResetKind,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tree_size" => Some(Self::TreeSize),
            "k_max" => Some(Self::KMax),
            "alpha" => Some(Self::Alpha),
            "obs_mask" => Some(Self::ObsMask),
            "reset.kind" | "reset_kind" => Some(Self::ResetKind),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TreeSize => "tree_size",
            Self::KMax => "k_max",
            Self::Alpha => "alpha",
            Self::ObsMask => "obs_mask",
            Self::ResetKind => "reset.kind",
        }
    }

    /// Config key the axis value is written to.
    pub fn key(self) -> &'static str {
        match self {
            Self::TreeSize => "planner.n_max",
            Self::KMax => "planner.k_max",
            Self::Alpha => "planner.alpha",
            Self::ObsMask => "task.obs_mask",
            Self::ResetKind => "reset.kind",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Final tree coverage.
    Coverage,
    /// Mean deterministic return from the validation starts.
    ValidationReturn,
    /// Mean training return over the last iterations.
    TrainReturn,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Coverage => "coverage",
            Self::ValidationReturn => "validation_return",
            Self::TrainReturn => "train_return",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: Axis,
    /// Cell values in axis order (trend verdicts read them left to right).
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Only grow trees; every cell is scored by coverage.
    pub plan_only: bool,
}

impl SweepSpec {
    /// Resolved config of one cell, with outputs under `out`.
    pub fn cell_config(&self, value: &str, seed: u64, out: &Path) -> Result<ExperimentConfig, StageError> {
        let mut c = self.base.clone();
        c.set(self.axis.key(), value)?;
        c.seed = seed;
        c.out = Some(out.to_path_buf());
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), StageError> {
        let bad = |m: &str| Err(StageError { stage: Stage::Config, message: m.into() });
        if self.values.is_empty() || self.seeds.is_empty() {
            return bad("a sweep needs at least one value and one seed");
        }
        for v in &self.values {
            self.cell_config(v, self.seeds[0], Path::new("."))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub coverage: Option<f64>,
    pub tree_nodes: Option<usize>,
    pub record: Option<RunRecord>,
    pub error: Option<StageError>,
}

impl CellRun {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Coverage => self.coverage,
            Metric::ValidationReturn => self.record.as_ref().map(|r| r.metrics.validation_return),
            Metric::TrainReturn => self.record.as_ref().map(|r| r.metrics.train_return),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub value: String,
    pub samples: Vec<f64>,
    pub median: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdicts {
    pub spearman: Option<f64>,
    /// Spearman of cell medians against axis order is at least `MONOTONE_RHO`.
    pub monotone: Option<bool>,
    /// Some interior cell attains the largest median.
    pub interior_peak: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: Axis,
    pub runs: Vec<CellRun>,
    pub seeds: usize,
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks);
/// `None` for fewer than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Largest median sits at an interior cell (ties count if an interior cell reaches it).
pub fn interior_peak(medians: &[f64]) -> Option<bool> {
    if medians.len() < 3 {
        return None;
    }
    let best = medians.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(medians[1..medians.len() - 1].contains(&best))
}

impl SweepResult {
    pub fn cells(&self, values: &[String], m: Metric) -> Vec<CellSummary> {
        values
            .iter()
            .map(|v| {
                let runs: Vec<&CellRun> = self.runs.iter().filter(|r| &r.value == v).collect();
                let samples: Vec<f64> = runs.iter().filter_map(|r| r.metric(m)).collect();
                CellSummary {
                    value: v.clone(),
                    median: median(&samples),
                    failures: runs.len() - samples.len(),
                    samples,
                }
            })
            .collect()
    }

    /// Trend verdicts over cell medians; `None` without at least two values,
    /// three seeds and a median in every cell.
    pub fn verdicts(&self, values: &[String], m: Metric) -> Verdicts {
        let cells = self.cells(values, m);
        let meds: Option<Vec<f64>> = cells.iter().map(|c| c.median).collect();
        let Some(meds) = meds.filter(|v| v.len() >= 2 && self.seeds >= 3) else {
            return Verdicts { spearman: None, monotone: None, interior_peak: None };
        };
        let order: Vec<f64> = (0..meds.len()).map(|i| i as f64).collect();
        let rho = spearman(&order, &meds);
        Verdicts {
            spearman: rho,
            monotone: Some(rho.is_some_and(|r| r >= MONOTONE_RHO)),
            interior_peak: interior_peak(&meds),
        }
    }

    /// Per-run CSV: axis value, seed, metrics and status.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("axis,value,seed,coverage,tree_nodes,validation_return,train_return,env_steps,status\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for r in &self.runs {
            let status = r.error.as_ref().map_or("ok".to_string(), |e| format!("error:{}", e.stage.as_str()));
            let _ = std::fmt::Write::write_fmt(
                &mut s,
                format_args!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    self.axis.as_str(),
                    r.value,
                    r.seed,
                    opt(r.coverage),
                    r.tree_nodes.map_or(String::new(), |n| n.to_string()),
                    opt(r.metric(Metric::ValidationReturn)),
                    opt(r.metric(Metric::TrainReturn)),
                    r.record.as_ref().map_or(String::new(), |x| x.metrics.env_steps.to_string()),
                    status
                ),
            );
        }
        s
    }

    /// Per-cell medians of every available metric, plus verdict rows.
    pub fn summary_csv(&self, values: &[String]) -> String {
        let mut s = String::from("axis,value,metric,median,samples,failures\n");
        let metrics = [Metric::Coverage, Metric::ValidationReturn, Metric::TrainReturn];
        for m in metrics {
            for c in self.cells(values, m).iter().filter(|c| !c.samples.is_empty()) {
                s.push_str(&format!(
                    "{},{},{},{:?},{},{}\n",
                    self.axis.as_str(),
                    c.value,
                    m.as_str(),
                    c.median.unwrap_or(f64::NAN),
                    c.samples.len(),
                    c.failures
                ));
            }
        }
        s
    }
}

fn cell_dir(out: &Path, axis: Axis, value: &str, seed: u64) -> PathBuf {
    let v: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    out.join(format!("{}_{v}", axis.as_str().replace('.', "_"))).join(format!("seed_{seed}"))
}

fn run_cell(spec: &SweepSpec, value: &str, seed: u64, out: &Path) -> CellRun {
    let dir = cell_dir(out, spec.axis, value, seed);
    let mut cell = CellRun {
        value: value.to_string(),
        seed,
        dir: dir.clone(),
        coverage: None,
        tree_nodes: None,
        record: None,
        error: None,
    };
    let result = (|| -> Result<(), StageError> {
        let cfg = spec.cell_config(value, seed, &dir)?;
        if spec.plan_only {
            fs::create_dir_all(&dir).map_err(|e| StageError { stage: Stage::Plan, message: e.to_string() })?;
            fs::write(dir.join(super::CONFIG_FILE), cfg.echo())
                .map_err(|e| StageError { stage: Stage::Plan, message: e.to_string() })?;
            let env = cfg.env.build();
            let tree = plan(&cfg, env.as_ref())?;
            save_tree(&tree, &dir.join(super::TREE_FILE)).map_err(|e| StageError { stage: Stage::Plan, message: e.to_string() })?;
            fs::write(dir.join(COVERAGE_FILE), coverage_csv(&tree))
                .map_err(|e| StageError { stage: Stage::Plan, message: e.to_string() })?;
            cell.coverage = Some(tree.coverage());
            cell.tree_nodes = Some(tree.len());
        } else {
            let r = run(&cfg, &dir)?;
            cell.coverage = r.metrics.tree_coverage;
            cell.tree_nodes = r.metrics.tree_nodes;
            cell.record = Some(r);
        }
        Ok(())
    })();
    cell.error = result.err();
    cell
}

/// Run every cell x seed (in parallel on the current rayon pool), write
/// `runs.csv`, `summary.csv` and one SVG per logged series kind into `out`.
/// Cell failures are recorded and the sweep continues.
pub fn sweep(spec: &SweepSpec, out: &Path) -> Result<SweepResult, StageError> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| StageError { stage: Stage::Config, message: e.to_string() })?;
    let jobs: Vec<(String, u64)> =
        spec.values.iter().flat_map(|v| spec.seeds.iter().map(move |&s| (v.clone(), s))).collect();
    let runs: Vec<CellRun> = jobs.par_iter().map(|(v, s)| run_cell(spec, v, *s, out)).collect();
    let result = SweepResult { axis: spec.axis, runs, seeds: spec.seeds.len() };
    let io = |e: std::io::Error| StageError { stage: Stage::Eval, message: e.to_string() };
    fs::write(out.join("runs.csv"), result.runs_csv()).map_err(io)?;
    fs::write(out.join("summary.csv"), result.summary_csv(&spec.values)).map_err(io)?;
    let name = spec.axis.as_str().replace('.', "_");
    for (kind, file) in [(PlotKind::Coverage, COVERAGE_FILE), (PlotKind::Curve, super::CURVE_FILE)] {
        let groups: Vec<(String, Vec<PathBuf>)> = spec
            .values
            .iter()
            .map(|v| {
                let paths = result
                    .runs
                    .iter()
                    .filter(|r| &r.value == v && r.error.is_none())
                    .map(|r| r.dir.join(file))
                    .filter(|p| p.exists())
                    .collect();
                (format!("{} = {v}", spec.axis.as_str()), paths)
            })
            .filter(|(_, p): &(String, Vec<PathBuf>)| !p.is_empty())
            .collect();
        if !groups.is_empty() {
            let svg = out.join(format!("{name}_{}.svg", file.trim_end_matches(".csv")));
            plot(&groups, kind, &svg).map_err(|e| StageError { stage: Stage::Eval, message: e.to_string() })?;
        }
    }
    Ok(result)
}
