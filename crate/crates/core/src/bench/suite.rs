//! Repeated seeded trials over a task list and their aggregation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deadline::Deadline;
use crate::sampling::Task;

use super::config::Config;
use super::metrics::mean_std;
use super::pipeline::{run_pipeline_with, Outcome, RunReport};
use super::taskfile::load_suite;
use super::BenchError;

/// R² above which a trial counts as accurate.
pub const R2_THRESHOLD: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub trials: usize,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
    /// Trial `i` runs with seed `first_seed + i`.
    pub first_seed: u64,
    /// Wall-clock cap on any single trial.
    pub max_trial_secs: Option<f64>,
    /// Typical runtimes measured elsewhere, by task name. They take
    /// precedence over measuring, so ablations can share a baseline.
    pub typical_secs: HashMap<String, f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { trials: 3, jobs: 0, first_seed: 1, max_trial_secs: Some(600.0), typical_secs: HashMap::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub outcomes: Vec<Outcome>,
    /// Fraction of trials that are sym-true.
    pub ssr: f64,
    /// Fraction of trials with test R² above [`R2_THRESHOLD`].
    pub r2_rate: f64,
    /// Mean and standard deviation of test R² over trials that have one.
    pub r2_mean: f64,
    pub r2_std: f64,
    /// Runtime the deadline of later trials was derived from.
    pub typical_secs: Option<f64>,
    pub reports: Vec<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub config_hash: String,
    pub trials: usize,
    pub tasks: Vec<TaskSummary>,
    /// Sym-true trials over all trials.
    pub ssr: f64,
    /// Mean and standard deviation over trial indices of the per-trial
    /// suite-wide rate.
    pub ssr_mean: f64,
    pub ssr_std: f64,
    pub r2_rate: f64,
    pub r2_rate_mean: f64,
    pub r2_rate_std: f64,
}

fn accurate(r: &RunReport) -> bool {
    r.test_r2().is_some_and(|v| v > R2_THRESHOLD)
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

impl TaskSummary {
    pub fn from_reports(task: &str, reports: Vec<RunReport>, typical_secs: Option<f64>) -> TaskSummary {
        let outcomes: Vec<Outcome> = reports.iter().map(|r| r.outcome).collect();
        let n = reports.len();
        let r2s: Vec<f64> = reports.iter().filter_map(|r| r.test_r2()).collect();
        let (r2_mean, r2_std) = mean_std(&r2s);
        TaskSummary {
            task: task.to_string(),
            ssr: rate(outcomes.iter().filter(|o| **o == Outcome::SymTrue).count(), n),
            r2_rate: rate(reports.iter().filter(|r| accurate(r)).count(), n),
            r2_mean,
            r2_std,
            outcomes,
            typical_secs,
            reports,
        }
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.outcomes.iter().filter(|o| **o == outcome).count()
    }
}

impl SuiteSummary {
    pub fn from_tasks(config_hash: String, trials: usize, tasks: Vec<TaskSummary>) -> SuiteSummary {
        let all: Vec<&RunReport> = tasks.iter().flat_map(|t| &t.reports).collect();
        let ssr = rate(all.iter().filter(|r| r.outcome == Outcome::SymTrue).count(), all.len());
        let r2_rate = rate(all.iter().filter(|r| accurate(r)).count(), all.len());
        let per_trial = |f: &dyn Fn(&RunReport) -> bool| -> Vec<f64> {
            (0..trials)
                .map(|i| {
                    let col: Vec<&RunReport> = tasks.iter().filter_map(|t| t.reports.get(i)).collect();
                    rate(col.iter().filter(|r| f(r)).count(), col.len())
                })
                .collect()
        };
        let (ssr_mean, ssr_std) = mean_std(&per_trial(&|r| r.outcome == Outcome::SymTrue));
        let (r2_rate_mean, r2_rate_std) = mean_std(&per_trial(&accurate));
        SuiteSummary { config_hash, trials, tasks, ssr, ssr_mean, ssr_std, r2_rate, r2_rate_mean, r2_rate_std }
    }

    /// Every run finished as sym-true or sym-false.
    pub fn all_completed(&self) -> bool {
        self.tasks.iter().all(|t| t.outcomes.iter().all(|o| o.completed()))
    }

    /// Tasks with at least `min` sym-true trials.
    pub fn tasks_recovered(&self, min: usize) -> usize {
        self.tasks.iter().filter(|t| t.count(Outcome::SymTrue) >= min).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,trials,sym_true,sym_false,out_of_time,failed,ssr,r2_rate,r2_mean,r2_std\n");
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4},{:.4},{:.6},{:.6}",
                t.task,
                t.outcomes.len(),
                t.count(Outcome::SymTrue),
                t.count(Outcome::SymFalse),
                t.count(Outcome::OutOfTime),
                t.count(Outcome::Failed),
                t.ssr,
                t.r2_rate,
                t.r2_mean,
                t.r2_std
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.tasks.iter().map(|t| t.task.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}  {:<24}  {:>6}  {:>7}  {:>10}\n", "task", "outcomes", "SSR", "R2>.99", "mean R2");
        for t in &self.tasks {
            let outcomes: Vec<&str> = t
                .outcomes
                .iter()
                .map(|o| match o {
                    Outcome::SymTrue => "T",
                    Outcome::SymFalse => "F",
                    Outcome::OutOfTime => "OOT",
                    Outcome::Failed => "ERR",
                })
                .collect();
            let mean = if t.r2_mean > -1e6 { format!("{:.6}", t.r2_mean) } else { "undefined".into() };
            let _ = writeln!(s, "{:<width$}  {:<24}  {:>6.3}  {:>7.3}  {:>10}", t.task, outcomes.join(" "), t.ssr, t.r2_rate, mean);
        }
        let _ = writeln!(
            s,
            "SSR {:.3} ({:.3} ± {:.3} over trials), R2>0.99 {:.3} ({:.3} ± {:.3})",
            self.ssr, self.ssr_mean, self.ssr_std, self.r2_rate, self.r2_rate_mean, self.r2_rate_std
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Deadline for a trial given the known typical runtime and the hard cap.
fn trial_deadline(cfg: &Config, typical: Option<f64>, cap: Option<f64>) -> Deadline {
    let budget = match (typical.map(|t| t.max(cfg.min_typical_secs) * cfg.deadline_factor), cap) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    budget.map_or(Deadline::none(), |b| Deadline::after(Duration::from_secs_f64(b)))
}

fn typical_cache(cfg: &Config, task: &Task) -> Option<std::path::PathBuf> {
    cfg.cache_dir.as_ref().map(|d| d.join(format!("typical-{}-{}.txt", task.hash(), cfg.hash())))
}

/// Trials of one task, in order. The first completed trial fixes the
/// typical runtime for the rest unless one is already known.
fn run_task(task: &Task, cfg: &Config, opts: &SuiteOptions) -> TaskSummary {
    let cache = typical_cache(cfg, task);
    let mut typical = opts
        .typical_secs
        .get(&task.name)
        .copied()
        .or(cfg.typical_runtime_secs)
        .or_else(|| cache.as_ref().and_then(|p| std::fs::read_to_string(p).ok()).and_then(|s| s.trim().parse().ok()));
    let mut reports = Vec::with_capacity(opts.trials);
    for i in 0..opts.trials {
        let seed = opts.first_seed + i as u64;
        let report = run_pipeline_with(task, cfg, seed, trial_deadline(cfg, typical, opts.max_trial_secs));
        log::info!("{} seed {seed}: {:?} in {:.1}s", task.name, report.outcome, report.total_secs);
        if typical.is_none() && report.outcome.completed() {
            typical = Some(report.total_secs);
            if let Some(p) = &cache {
                if let Err(e) = std::fs::write(p, format!("{}\n", report.total_secs)) {
                    log::warn!("could not cache typical runtime at {}: {e}", p.display());
                }
            }
        }
        reports.push(report);
    }
    TaskSummary::from_reports(&task.name, reports, typical)
}

/// Runs `opts.trials` seeded trials of every task, tasks in parallel.
pub fn run_tasks(tasks: &[Task], cfg: &Config, opts: &SuiteOptions) -> Result<SuiteSummary, BenchError> {
    if tasks.is_empty() {
        return Err(BenchError::EmptySuite);
    }
    if opts.trials == 0 {
        return Err(BenchError::Config("at least one trial is required".into()));
    }
    cfg.validate()?;
    let go = || tasks.par_iter().map(|t| run_task(t, cfg, opts)).collect::<Vec<_>>();
    let summaries = if opts.jobs == 0 {
        go()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| BenchError::Config(e.to_string()))?
            .install(go)
    };
    Ok(SuiteSummary::from_tasks(cfg.hash(), opts.trials, summaries))
}

pub fn run_suite(path: &Path, cfg: &Config, opts: &SuiteOptions) -> Result<SuiteSummary, BenchError> {
    run_tasks(&load_suite(path)?, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::pipeline::{CANONICAL_STAGES, StageRecord, StageStatus};

    fn report(outcome: Outcome, r2: Option<f64>) -> RunReport {
        let metrics = r2.map(|v| crate::bench::pipeline::RunMetrics {
            test_r2: v,
            data_r2: v,
            unrounded_expr: "x1".into(),
            unrounded_test_r2: v,
            equivalence: crate::expr::equivalent_up_to_affine(
                &crate::expr::Expr::var(0),
                &crate::expr::Expr::var(0),
                &[(1.0, 2.0)],
                &Default::default(),
            ),
        });
        RunReport {
            task: "t".into(),
            seed: 0,
            config_hash: String::new(),
            outcome,
            failure: None,
            stages: CANONICAL_STAGES
                .iter()
                .map(|&stage| StageRecord { stage, status: StageStatus::Done, secs: 0.0, snapshot: None, note: None })
                .collect(),
            final_expr: None,
            metrics,
            extraction_error: None,
            sparsity: None,
            oversample_rounds: vec![],
            samples: 0,
            total_secs: 0.0,
        }
    }

    #[test]
    fn task_rates() {
        let t = TaskSummary::from_reports(
            "t",
            vec![
                report(Outcome::SymTrue, Some(1.0)),
                report(Outcome::SymTrue, Some(0.999)),
                report(Outcome::SymFalse, Some(0.5)),
            ],
            None,
        );
        assert!((t.ssr - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.r2_rate - 2.0 / 3.0).abs() < 1e-15);
        let t = TaskSummary::from_reports("u", vec![report(Outcome::OutOfTime, None), report(Outcome::SymTrue, Some(1.0))], None);
        assert_eq!(t.ssr, 0.5);
        assert_eq!(t.r2_mean, 1.0);
    }

    #[test]
    fn empty_suite_is_an_error() {
        assert!(matches!(run_tasks(&[], &Config::default(), &SuiteOptions::default()), Err(BenchError::EmptySuite)));
    }

    #[test]
    fn per_trial_spread() {
        let a = TaskSummary::from_reports("a", vec![report(Outcome::SymTrue, Some(1.0)), report(Outcome::SymFalse, Some(0.0))], None);
        let b = TaskSummary::from_reports("b", vec![report(Outcome::SymTrue, Some(1.0)), report(Outcome::SymTrue, Some(1.0))], None);
        let s = SuiteSummary::from_tasks(String::new(), 2, vec![a, b]);
        assert_eq!(s.ssr, 0.75);
        assert_eq!((s.ssr_mean, s.ssr_std), (0.75, 0.25));
        assert!(!s.to_csv().is_empty() && s.to_text().contains("SSR 0.750"));
        assert_eq!(s.tasks_recovered(2), 1);
    }
}
