//! One benchmark run: data, two-phase ADMM training, pruning, extraction
//! and constant refinement, each stage under a shared deadline.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{run_phase_with, PhaseKind, PhaseOutcome, TrainData};
use crate::deadline::Deadline;
use crate::expr::{equivalent_up_to_affine, EquivalenceResult};
use crate::extraction::{extract, optimize_coefficients, round_final, round_to_zero, CandidateFormula};
use crate::net::LiesNet;
use crate::pruning::{prune_and_clean, structural_cleanup};
use crate::sampling::{generate, load_or_generate, oversample_rounds, Dataset, Model, RoundTrace, Task, TransformRecord, Transformed};

use super::config::{Config, PhaseSettings};
use super::metrics::r2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Transform,
    WeakAdmm,
    Oversample,
    WeakAdmmFinal,
    StrongAdmm,
    Prune,
    Extract,
    RoundToZero,
    OptimizeCoefficients,
    RoundFinal,
    Metrics,
}

pub const CANONICAL_STAGES: [Stage; 12] = [
    Stage::Generate,
    Stage::Transform,
    Stage::WeakAdmm,
    Stage::Oversample,
    Stage::WeakAdmmFinal,
    Stage::StrongAdmm,
    Stage::Prune,
    Stage::Extract,
    Stage::RoundToZero,
    Stage::OptimizeCoefficients,
    Stage::RoundFinal,
    Stage::Metrics,
];

/// Stages whose time counts as symbolic extraction.
pub const EXTRACTION_STAGES: [Stage; 4] =
    [Stage::Extract, Stage::RoundToZero, Stage::OptimizeCoefficients, Stage::RoundFinal];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    /// Disabled by the configuration.
    Skipped,
    Interrupted,
    Failed,
    NotReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub secs: f64,
    /// Current formula after symbolic stages.
    pub snapshot: Option<String>,
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    SymTrue,
    SymFalse,
    OutOfTime,
    /// A stage returned an error.
    Failed,
}

impl Outcome {
    /// Sym-true and sym-false runs completed.
    pub fn completed(self) -> bool {
        matches!(self, Outcome::SymTrue | Outcome::SymFalse)
    }
}

/// Test-split metrics and refinement details of a completed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// R² of the final formula on the held-out split.
    pub test_r2: f64,
    /// R² of the final formula on the whole dataset.
    pub data_r2: f64,
    /// Fitted formula without either rounding pass.
    pub unrounded_expr: String,
    pub unrounded_test_r2: f64,
    pub equivalence: EquivalenceResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: Outcome,
    pub failure: Option<String>,
    pub stages: Vec<StageRecord>,
    pub final_expr: Option<String>,
    /// Present exactly when the outcome is sym-true or sym-false.
    pub metrics: Option<RunMetrics>,
    /// Largest relative gap between the extracted formula and the network
    /// on unclipped training samples.
    pub extraction_error: Option<f64>,
    pub sparsity: Option<Sparsity>,
    pub oversample_rounds: Vec<RoundTrace>,
    pub samples: usize,
    pub total_secs: f64,
}

/// Weight counts around the strong phase and pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    /// Nonzero parameters entering the strong phase.
    pub nnz_before_strong: usize,
    /// Nonzero entries of `Z` when the strong phase ends.
    pub nnz_z_after_strong: usize,
    pub nnz_after_prune: usize,
    /// R² of the pruned network's log-space outputs against the unpruned
    /// network's on the training inputs.
    pub prune_r2: f64,
}

/// R² reported when the formula cannot be evaluated on some test point.
pub const R2_UNDEFINED: f64 = -f64::MAX;

impl RunReport {
    pub fn stage_list(&self) -> Vec<Stage> {
        self.stages.iter().map(|s| s.stage).collect()
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage is recorded")
    }

    pub fn extraction_secs(&self) -> f64 {
        self.stages.iter().filter(|s| EXTRACTION_STAGES.contains(&s.stage)).map(|s| s.secs).sum()
    }

    pub fn test_r2(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.test_r2)
    }

    /// Copy with every wall time zeroed, for determinism checks.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.total_secs = 0.0;
        r.stages.iter_mut().for_each(|s| s.secs = 0.0);
        r
    }
}

/// A network read as a model of the original target.
#[derive(Clone, Debug)]
pub struct NetModel {
    pub net: LiesNet,
    pub rec: TransformRecord,
}

impl Model for NetModel {
    fn predict(&self, x: &[f64]) -> Result<f64, String> {
        self.net.predict(&self.rec.apply_x(x)).map(f64::exp).map_err(|e| e.to_string())
    }
}

enum Stop {
    OutOfTime,
    Failed(String),
}

struct Recorder {
    stages: Vec<StageRecord>,
    current: Option<(Stage, Instant)>,
}

impl Recorder {
    fn start(&mut self, stage: Stage, deadline: &Deadline) -> Result<(), Stop> {
        self.current = Some((stage, Instant::now()));
        if deadline.expired() {
            return Err(Stop::OutOfTime);
        }
        Ok(())
    }

    fn finish(&mut self, status: StageStatus, snapshot: Option<String>, note: Option<String>) {
        let (stage, t) = self.current.take().expect("a stage is open");
        self.stages.push(StageRecord { stage, status, secs: t.elapsed().as_secs_f64(), snapshot, note });
    }

    fn done(&mut self) {
        self.finish(StageStatus::Done, None, None);
    }

    fn formula(&mut self, f: &CandidateFormula) {
        self.finish(StageStatus::Done, Some(f.frozen().to_string()), None);
    }

    fn skip(&mut self) {
        self.finish(StageStatus::Skipped, None, None);
    }
}

struct Run<'a> {
    task: &'a Task,
    cfg: &'a Config,
    seed: u64,
    deadline: Deadline,
    rec: Recorder,
    report: RunReport,
}

/// [`run_pipeline_with`] under `deadline_factor × typical_runtime_secs`,
/// or without a deadline when no typical runtime is configured.
pub fn run_pipeline(task: &Task, cfg: &Config, seed: u64) -> RunReport {
    let deadline = match cfg.typical_runtime_secs {
        Some(t) => Deadline::after(Duration::from_secs_f64((t * cfg.deadline_factor).max(0.0))),
        None => Deadline::none(),
    };
    run_pipeline_with(task, cfg, seed, deadline)
}

/// Runs every stage of [`CANONICAL_STAGES`] in order. Errors and deadline
/// expiry end the run early; the report always lists every stage.
pub fn run_pipeline_with(task: &Task, cfg: &Config, seed: u64, deadline: Deadline) -> RunReport {
    let t0 = Instant::now();
    let mut run = Run {
        task,
        cfg,
        seed,
        deadline,
        rec: Recorder { stages: Vec::with_capacity(CANONICAL_STAGES.len()), current: None },
        report: RunReport {
            task: task.name.clone(),
            seed,
            config_hash: cfg.hash(),
            outcome: Outcome::Failed,
            failure: None,
            stages: Vec::new(),
            final_expr: None,
            metrics: None,
            extraction_error: None,
            sparsity: None,
            oversample_rounds: Vec::new(),
            samples: 0,
            total_secs: 0.0,
        },
    };
    let result = match cfg.validate().and_then(|_| task.validate().map_err(Into::into)) {
        Ok(()) => run.execute(),
        Err(e) => {
            run.rec.current = Some((Stage::Generate, Instant::now()));
            Err(Stop::Failed(e.to_string()))
        }
    };
    if let Err(stop) = result {
        let (status, outcome, msg) = match stop {
            Stop::OutOfTime => (StageStatus::Interrupted, Outcome::OutOfTime, None),
            Stop::Failed(m) => (StageStatus::Failed, Outcome::Failed, Some(m)),
        };
        if run.rec.current.is_some() {
            let stage = run.rec.current.map(|c| c.0);
            run.rec.finish(status, None, msg.clone());
            run.report.failure = msg.map(|m| format!("{:?}: {m}", stage.expect("stage is open")));
        }
        run.report.outcome = outcome;
        run.report.final_expr = None;
        run.report.metrics = None;
    }
    let mut stages = std::mem::take(&mut run.rec.stages);
    for &s in &CANONICAL_STAGES[stages.len()..] {
        stages.push(StageRecord { stage: s, status: StageStatus::NotReached, secs: 0.0, snapshot: None, note: None });
    }
    let mut report = run.report;
    report.stages = stages;
    report.total_secs = t0.elapsed().as_secs_f64();
    assert_eq!(report.stage_list(), CANONICAL_STAGES, "stage order");
    report
}

impl Run<'_> {
    fn train(&self, net: &LiesNet, data: &Transformed, s: &PhaseSettings, kind: PhaseKind, seed: u64) -> Result<LiesNet, Stop> {
        self.train_phase(net, data, s, kind, seed).map(|o| o.net)
    }

    fn train_phase(
        &self,
        net: &LiesNet,
        data: &Transformed,
        s: &PhaseSettings,
        kind: PhaseKind,
        seed: u64,
    ) -> Result<PhaseOutcome, Stop> {
        let phase = s.to_phase(kind, self.task.arity, &self.cfg.loss);
        let deadline = self.deadline;
        let (out, interrupted) =
            run_phase_with(net, TrainData { u: &data.u, v: &data.v }, &phase, seed, &mut || deadline.expired())
                .map_err(|e| Stop::Failed(e.to_string()))?;
        if interrupted {
            return Err(Stop::OutOfTime);
        }
        Ok(out)
    }

    fn check(&self, interrupted: bool) -> Result<(), Stop> {
        if interrupted || self.deadline.expired() {
            Err(Stop::OutOfTime)
        } else {
            Ok(())
        }
    }

    fn execute(&mut self) -> Result<(), Stop> {
        let (task, cfg, seed) = (self.task, self.cfg, self.seed);
        let fail = |e: &dyn std::fmt::Display| Stop::Failed(e.to_string());

        self.rec.start(Stage::Generate, &self.deadline)?;
        let count = cfg.samples.unwrap_or(task.count);
        let data = match &cfg.cache_dir {
            Some(dir) => load_or_generate(dir, task, count, seed),
            None => generate(task, count, seed),
        }
        .map_err(|e| fail(&e))?;
        self.rec.done();

        self.rec.start(Stage::Transform, &self.deadline)?;
        let (transformed, rec) = crate::sampling::fit_apply_transform(&data).map_err(|e| fail(&e))?;
        self.rec.done();

        self.rec.start(Stage::WeakAdmm, &self.deadline)?;
        let layers = task.layers.unwrap_or(task.arity + 1);
        let net = LiesNet::with_config(task.arity, layers, seed, cfg.activation, cfg.init_scale).map_err(|e| fail(&e))?;
        let net = self.train(&net, &transformed, &cfg.weak, PhaseKind::Weak, seed)?;
        self.rec.done();

        self.rec.start(Stage::Oversample, &self.deadline)?;
        let (net, data) = if cfg.stages.oversample {
            let mut retrain_seed = seed.wrapping_add(100);
            let model = NetModel { net, rec: rec.clone() };
            let trainer = |d: &Dataset, m: &NetModel| -> Result<NetModel, String> {
                retrain_seed += 1;
                let t = m.rec.apply(d).map_err(|e| e.to_string())?;
                match self.train(&m.net, &t, &cfg.weak, PhaseKind::Weak, retrain_seed) {
                    Ok(net) => Ok(NetModel { net, rec: m.rec.clone() }),
                    Err(Stop::OutOfTime) => Err("out of time".into()),
                    Err(Stop::Failed(e)) => Err(e),
                }
            };
            let out = oversample_rounds(task, data, model, trainer, &cfg.oversample, seed.wrapping_add(7))
                .map_err(|e| fail(&e))?;
            self.check(false)?;
            if let Some(e) = out.aborted {
                return Err(Stop::Failed(e));
            }
            let accepted = out.rounds.iter().filter(|r| r.accepted).count();
            self.report.oversample_rounds = out.rounds;
            self.rec.finish(StageStatus::Done, None, Some(format!("{accepted} rounds accepted")));
            (out.model.net, out.dataset)
        } else {
            self.rec.skip();
            (net, data)
        };
        self.report.samples = data.len();

        self.rec.start(Stage::WeakAdmmFinal, &self.deadline)?;
        let (train, test) = split(&data, cfg.test_fraction, seed.wrapping_add(3));
        let train_t = rec.apply(&train).map_err(|e| fail(&e))?;
        let net = self.train(&net, &train_t, &cfg.weak, PhaseKind::Weak, seed.wrapping_add(1))?;
        self.rec.done();

        self.rec.start(Stage::StrongAdmm, &self.deadline)?;
        let nnz_before_strong = net.nnz();
        let strong = self.train_phase(&net, &train_t, &cfg.strong, PhaseKind::Strong, seed.wrapping_add(2))?;
        let nnz_z_after_strong = strong.state.nnz_z();
        let net = strong.net;
        self.rec.done();

        self.rec.start(Stage::Prune, &self.deadline)?;
        let unpruned = net.clone();
        let net = if cfg.stages.gradient_prune {
            let (net, rep) = prune_and_clean(&net, &train_t.u, cfg.prune_threshold, &self.deadline)
                .map_err(|e| fail(&e))?
                .ok_or(Stop::OutOfTime)?;
            let note = format!("nnz {} -> {}", rep.nnz_before, rep.nnz_after);
            self.rec.finish(StageStatus::Done, None, Some(note));
            net
        } else {
            let (net, _) = structural_cleanup(&net);
            self.rec.finish(StageStatus::Skipped, None, Some("structural cleanup only".into()));
            net
        };
        self.report.sparsity = Some(Sparsity {
            nnz_before_strong,
            nnz_z_after_strong,
            nnz_after_prune: net.nnz(),
            prune_r2: agreement(&unpruned, &net, &train_t.u),
        });

        self.rec.start(Stage::Extract, &self.deadline)?;
        let f = extract(&net, &rec);
        self.report.extraction_error = extraction_error(&f, &NetModel { net, rec }, &train);
        self.rec.formula(&f);
        let extracted = f.clone();

        self.rec.start(Stage::RoundToZero, &self.deadline)?;
        let (f, zero_log) = if cfg.stages.round_to_zero {
            let (g, log) = round_to_zero(&f, &train, cfg.round_threshold, &self.deadline);
            self.check(log.interrupted)?;
            self.rec.formula(&g);
            (g, Some(log))
        } else {
            self.rec.skip();
            (f, None)
        };

        self.rec.start(Stage::OptimizeCoefficients, &self.deadline)?;
        let f = if cfg.stages.optimize_coefficients {
            let (g, rep) = optimize_coefficients(&f, &train, &cfg.fit, &self.deadline);
            self.check(rep.interrupted)?;
            self.rec.formula(&g);
            g
        } else {
            self.rec.skip();
            f
        };
        let fitted = f.clone();

        self.rec.start(Stage::RoundFinal, &self.deadline)?;
        let f = if cfg.stages.round_final {
            let (g, log) = round_final(&f, &train, cfg.round_threshold, &self.deadline);
            self.check(log.interrupted)?;
            self.rec.formula(&g);
            g
        } else {
            self.rec.skip();
            f
        };

        self.rec.start(Stage::Metrics, &self.deadline)?;
        // the fitted formula is already unrounded when rounding to zero changed nothing
        let unrounded = if zero_log.is_some_and(|l| !l.accepted.is_empty()) && cfg.stages.optimize_coefficients {
            let (g, rep) = optimize_coefficients(&extracted, &train, &cfg.fit, &self.deadline);
            self.check(rep.interrupted)?;
            g
        } else {
            fitted
        };
        let test_r2 = formula_r2(&f, &test).map_err(|e| fail(&e))?;
        let data_r2 = formula_r2(&f, &data).map_err(|e| fail(&e))?;
        let unrounded_test_r2 = formula_r2(&unrounded, &test).map_err(|e| fail(&e))?;
        let equivalence = equivalent_up_to_affine(&f.frozen(), &task.truth, &task.ranges, &cfg.equivalence);
        self.report.outcome = if equivalence.is_equivalent() { Outcome::SymTrue } else { Outcome::SymFalse };
        self.report.final_expr = Some(f.frozen().to_string());
        self.report.metrics = Some(RunMetrics {
            test_r2,
            data_r2,
            unrounded_expr: unrounded.frozen().to_string(),
            unrounded_test_r2,
            equivalence,
        });
        self.rec.done();
        Ok(())
    }
}

/// Shuffled split into `(train, test)` with `ceil(fraction·len)` test rows.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((fraction * ds.len() as f64).ceil() as usize).min(ds.len());
    let (test, train) = idx.split_at(n_test);
    (ds.subset(train), ds.subset(test))
}

/// R² in the original space; [`R2_UNDEFINED`] when some prediction is not
/// finite.
pub fn formula_r2(f: &CandidateFormula, ds: &Dataset) -> Result<f64, super::BenchError> {
    let pred: Option<Vec<f64>> = ds.x.iter().map(|x| f.eval(x)).collect();
    match pred {
        Some(p) => r2(&p, &ds.y).map(|v| if v.is_finite() { v } else { R2_UNDEFINED }),
        None => Ok(R2_UNDEFINED),
    }
}

/// R² of `b`'s outputs against `a`'s; [`R2_UNDEFINED`] when either fails.
fn agreement(a: &LiesNet, b: &LiesNet, u: &[Vec<f64>]) -> f64 {
    let pa: Result<Vec<f64>, _> = u.iter().map(|x| a.predict(x)).collect();
    let pb: Result<Vec<f64>, _> = u.iter().map(|x| b.predict(x)).collect();
    match (pa, pb) {
        (Ok(pa), Ok(pb)) => match r2(&pb, &pa) {
            Ok(v) if v.is_finite() => v,
            // a constant network is matched exactly or not at all
            Err(_) if pa == pb => 1.0,
            _ => R2_UNDEFINED,
        },
        _ => R2_UNDEFINED,
    }
}

/// Maximum relative deviation over at most 200 samples on which no
/// activation clips; `None` when there is no such sample.
pub fn extraction_error(f: &CandidateFormula, model: &NetModel, ds: &Dataset) -> Option<f64> {
    let mut worst: Option<f64> = None;
    let mut used = 0;
    for x in &ds.x {
        if used == 200 {
            break;
        }
        let u = model.rec.apply_x(x);
        if model.net.clipping_active(&u).unwrap_or(true) {
            continue;
        }
        let Ok(net) = model.predict(x) else { continue };
        used += 1;
        let rel = match f.eval(x) {
            Some(sym) => (sym - net).abs() / net.abs().max(f64::MIN_POSITIVE),
            None => f64::INFINITY,
        };
        worst = Some(worst.map_or(rel, |w: f64| w.max(rel)));
    }
    worst
}
