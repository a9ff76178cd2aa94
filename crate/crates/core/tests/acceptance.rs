//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the terminal; exits non-zero when any
//! criterion fails.

use std::collections::HashMap;
use std::time::Instant;

use lies::admm::z_update;
use lies::autodiff::forward;
use lies::bench::{desk_suite, run_tasks, Config, Outcome, SuiteOptions, SuiteSummary};
use lies::expr::{equivalent_up_to_affine, parse, EquivalenceConfig};
use lies::net::{Activation, LiesNet};
use lies::sampling::{cell_errors, generate, oversample_rounds, Dataset, Model, OversampleConfig, Task};
use lies::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Default)]
struct Board {
    results: Vec<(String, bool)>,
}

impl Board {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("[{}] criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((id.to_string(), pass));
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Minimiser of `λ|z| + ρ/2 (v − z)²` by scanning a grid of step 1e-5.
fn prox_scan(v: f64, lambda: f64, rho: f64) -> f64 {
    let obj = |z: f64| lambda * z.abs() + 0.5 * rho * (v - z).powi(2);
    let step = 1e-5;
    let lo = -v.abs() - 0.01;
    let n = ((2.0 * v.abs() + 0.02) / step).ceil() as usize;
    let mut best = (obj(0.0), 0.0);
    for k in 0..=n {
        let z = lo + k as f64 * step;
        let o = obj(z);
        if o < best.0 {
            best = (o, z);
        }
    }
    best.1
}

fn criterion_4(board: &mut Board) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut at_threshold = 0;
    for case in 0..1000 {
        let lambda: f64 = rng.gen_range(1e-4..1.0);
        let rho: f64 = rng.gen_range(0.005..2.0);
        let t = lambda / rho;
        let u = rng.gen_range(-1.0..1.0);
        let w = if case % 5 == 0 {
            at_threshold += 1;
            // |w + u| lands exactly on λ/ρ
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * t - u
        } else {
            rng.gen_range(-3.0..3.0) * t.max(0.1) - u
        };
        let z = z_update(&[Tensor::from_vec(1, 1, vec![w])], &[Tensor::from_vec(1, 1, vec![u])], lambda, rho).unwrap();
        worst = worst.max((z[0].data[0] - prox_scan(w + u, lambda, rho)).abs());
    }
    board.record(
        "4",
        worst <= 1e-4,
        format!("z_update vs grid proximal oracle on 1000 cases ({at_threshold} at the threshold): max gap {worst:.2e} (limit 1e-4)"),
    );
}

/// True when some clipped neuron input is within `margin` of its cutoff.
fn near_kink(net: &LiesNet, u: &[f64], margin: f64) -> bool {
    let t = net.trace(u).unwrap();
    t.pre.iter().any(|h| {
        Activation::ORDER.iter().zip(h).any(|(kind, v)| match kind {
            Activation::Log => (v - net.activation.log_cutoff).abs() < margin,
            Activation::Exp => (v - net.activation.exp_cutoff).abs() < margin,
            _ => false,
        })
    })
}

/// Richardson-extrapolated central differences over a ladder of steps; the
/// estimate that agrees best with its neighbour balances truncation against
/// cancellation.
fn stable_difference(f: &mut dyn FnMut(f64) -> f64) -> f64 {
    let steps = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5];
    let d: Vec<f64> =
        steps.iter().map(|&h| (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)).collect();
    let best = (0..d.len() - 1).min_by(|&i, &j| (d[i] - d[i + 1]).abs().total_cmp(&(d[j] - d[j + 1]).abs())).unwrap();
    d[best + 1]
}

fn criterion_5(board: &mut Board) {
    let (mut checked, mut failures, mut worst_rel) = (0usize, 0usize, 0.0f64);
    let mut first_failure = None;
    for k in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + k);
        let n = rng.gen_range(1..=3);
        let layers = rng.gen_range(2..=4);
        let net = LiesNet::with_layers(n, layers, 500 + k).unwrap();
        let m = 5f64.ln();
        let mut batch = Vec::new();
        while batch.len() < 20 {
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0f64..5.0).ln() / m).collect();
            if net.predict(&u).is_ok() && !near_kink(&net, &u, 1e-3) {
                batch.push(u);
            }
        }
        let grads = forward(&net, &batch).unwrap().backward_outputs(&net, &[1.0; 20]).unwrap();
        let total = |net: &LiesNet| batch.iter().map(|u| net.predict(u).unwrap()).sum::<f64>();
        for id in net.param_ids() {
            let mut p = net.clone();
            let mut at = |d: f64| {
                p.set(id, net.get(id) + d);
                total(&p)
            };
            let fd = stable_difference(&mut at);
            let g = grads.tensors[id.tensor].data[id.index];
            checked += 1;
            let ok = if g.abs() > 1e-8 {
                let rel = (g - fd).abs() / g.abs().max(fd.abs());
                worst_rel = worst_rel.max(rel);
                rel < 1e-5
            } else {
                (g - fd).abs() < 1e-8
            };
            if !ok {
                failures += 1;
                first_failure.get_or_insert(format!("net {k} param {id:?}: {g} vs {fd}"));
            }
        }
    }
    board.record(
        "5",
        failures == 0,
        format!(
            "autodiff vs extrapolated central differences on 50 nets x 20 samples: {checked} parameters, {failures} outside tolerance, worst relative {worst_rel:.2e}{}",
            first_failure.map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    );
}

fn cell_of(x: &[f64], ranges: &[(f64, f64)], k: usize) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    for (v, (lo, hi)) in x.iter().zip(ranges) {
        let b = (((v - lo) / (hi - lo)) * k as f64).floor().clamp(0.0, k as f64 - 1.0) as usize;
        idx += b * stride;
        stride *= k;
    }
    idx
}

/// The task's truth except on a set of corrupted cells.
#[derive(Clone)]
struct Patched {
    truth: lies::expr::Expr,
    ranges: Vec<(f64, f64)>,
    k: usize,
    bad: Vec<(usize, f64)>,
}

impl Model for Patched {
    fn predict(&self, x: &[f64]) -> Result<f64, String> {
        let y = self.truth.eval(x).map_err(|e| e.to_string())?;
        let c = cell_of(x, &self.ranges, self.k);
        Ok(match self.bad.iter().find(|(b, _)| *b == c) {
            Some((_, amp)) => y * (1.0 + amp * (x[0] * 7.0).sin()),
            None => y,
        })
    }
}

fn criterion_8(board: &mut Board) {
    let formulas = ["x1*x2", "x1/x2", "exp(-x1)*x2", "x1*x2*x3", "sqrt(x1)"];
    let (mut rounds, mut inside_ok, mut argmax_ok, mut never_worse, mut accepted, mut rejected) = (0, 0, 0, 0, 0, 0);
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + trial);
        let f = formulas[trial as usize % formulas.len()];
        let probe = parse(f).unwrap();
        let n = probe.arity();
        let k: usize = if n == 3 { 3 } else { rng.gen_range(3..=6) };
        let task = Task::new("c8", f, vec![(1.0, 5.0); n], 1500).unwrap();
        let ds = generate(&task, 1500, 800 + trial).unwrap();
        let target = rng.gen_range(0..k.pow(n as u32));
        let model = Patched { truth: task.truth.clone(), ranges: task.ranges.clone(), k, bad: vec![(target, 0.8)] };
        let e1 = cell_errors(&model, &ds, &task.ranges, k).unwrap().mean;
        let mut trng = ChaCha8Rng::seed_from_u64(900 + trial);
        // half the retrains repair the worst cell, the rest damage a new one
        let trainer = |_: &Dataset, m: &Patched| {
            let mut next = m.clone();
            if trng.gen::<bool>() {
                next.bad.retain(|(c, _)| *c != target);
            } else {
                next.bad.push((trng.gen_range(0..k.pow(n as u32)), 2.0));
            }
            Ok(next)
        };
        let cfg = OversampleConfig { k, ..OversampleConfig::default() };
        let out = oversample_rounds(&task, ds, model, trainer, &cfg, 800 + trial).unwrap();
        let e_final = cell_errors(&out.model, &out.dataset, &task.ranges, k).unwrap().mean;
        if out.rounds.first().is_some_and(|r| r.worst_cell == target) {
            argmax_ok += 1;
        }
        for r in &out.rounds {
            rounds += 1;
            if r.added_inside as f64 >= 0.9 * r.added as f64 {
                inside_ok += 1;
            }
            if r.accepted {
                accepted += 1;
            } else {
                rejected += 1;
            }
        }
        if e_final <= e1 && (e_final - out.final_error).abs() <= 1e-12 * e1.max(1.0) {
            never_worse += 1;
        }
    }
    board.record(
        "8",
        inside_ok == rounds && never_worse == 100 && argmax_ok == 100,
        format!(
            "oversampling on 100 corrupted models: {inside_ok}/{rounds} rounds with >=90% of points in the chosen cell, \
             corrupted cell chosen first {argmax_ok}/100, final E <= E1 in {never_worse}/100 ({accepted} accepted, {rejected} rejected rounds)"
        ),
    );
}

const POSITIVE: [(&str, &str); 30] = [
    ("x1*x2", "2*x1*x2 + 1"),
    ("exp(ln(x1) + ln(x2))", "x1*x2"),
    ("x1/x2", "exp(ln(x1) - ln(x2))"),
    ("sqrt(x1*x2)", "x1^0.5*x2^0.5"),
    ("3*x1", "x1"),
    ("exp(-x1)", "5*exp(-x1) - 2"),
    ("sin(x1)", "cos(x1 - 1.5707963267948966)"),
    ("x1^2*x2", "exp(2*ln(x1) + ln(x2))"),
    ("x1/(x2*x3)", "x1*x2^-1*x3^-1"),
    ("ln(x1*x2)", "ln(x1) + ln(x2)"),
    ("x1 + x2", "-(x1 + x2) + 7"),
    ("2.5*x1*x2", "x1*x2"),
    ("x1^3", "x1*x1*x1"),
    ("exp(x1)*exp(x2)", "exp(x1 + x2)"),
    ("sin(x1)*sin(x1)", "1 - cos(x1)^2"),
    ("x1^0.5", "sqrt(x1)"),
    ("(x1 + 1)^2", "x1^2 + 2*x1"),
    ("x1*x2*x3", "0.1*x3*x2*x1 - 4"),
    ("exp(-x1)*x2", "x2/exp(x1)"),
    ("ln(x1^3)", "ln(x1)"),
    ("x1/x2 + x2/x1", "(x1^2 + x2^2)/(x1*x2)"),
    ("sin(2*x1)", "sin(x1)*cos(x1)"),
    ("exp(ln(x1)*2)", "x1^2"),
    ("1/x1", "x1^-1 + 3"),
    ("x1^2 - x2^2", "(x1 - x2)*(x1 + x2)"),
    ("exp(x1/2)^2", "exp(x1)"),
    ("x1*ln(x2)", "-x1*ln(1/x2)"),
    ("sqrt(x1)*sqrt(x1)", "x1"),
    ("x1 + x2 + x3", "3*(x1 + x2 + x3)/2 - 1"),
    ("exp(-x1^2)", "exp(-x1*x1)*4"),
];

const NEGATIVE: [(&str, &str); 30] = [
    ("x1*x2", "x1 + x2"),
    ("x1/x2", "x2/x1"),
    ("x1^2", "x1^2.1"),
    ("sin(x1)", "sin(1.1*x1)"),
    ("exp(-x1)", "exp(-1.05*x1)"),
    ("x1*x2", "x1*x2 + 0.01*x1"),
    ("ln(x1)", "x1"),
    ("sqrt(x1*x2)", "x1*x2"),
    ("x1*x2*x3", "x1*x2"),
    ("x1/(x2*x3)", "x1/(x2 + x3)"),
    ("exp(x1)", "x1^3"),
    ("x1^2*x2", "x1*x2^2"),
    ("sin(x1)", "x1"),
    ("1/x1", "exp(-x1)"),
    ("x1 + x2", "x1 + 2*x2"),
    ("ln(x1 + x2)", "ln(x1) + ln(x2)"),
    ("x1^0.5", "ln(x1)"),
    ("3*x1", "x1^1.01"),
    ("x1*x2", "(x1*x2)^1.1"),
    ("sin(x1)*x2", "sin(x2)*x1"),
    ("exp(x1*x2)", "exp(x1)*x2"),
    ("x1/x2", "x1 - x2"),
    ("x1^2 + x2^2", "(x1 + x2)^2"),
    ("2.5*x1*x2", "2.5*x1 + x2"),
    ("exp(-x1)", "1/(1 + x1)"),
    ("x1*x3", "x2*x3"),
    ("sin(x1 + x2)", "sin(x1) + sin(x2)"),
    ("x1^3", "x1^3 + x1"),
    ("ln(x1)*x2", "ln(x2)*x1"),
    ("x1", "x1 + 0.001*x1^2"),
];

fn criterion_9(board: &mut Board) {
    let dom = vec![(1.0, 5.0); 3];
    let cfg = EquivalenceConfig::default();
    let mut errors = Vec::new();
    for (expect, pairs) in [(true, &POSITIVE), (false, &NEGATIVE)] {
        for (a, b) in pairs.iter() {
            let r = equivalent_up_to_affine(&parse(a).unwrap(), &parse(b).unwrap(), &dom, &cfg);
            if r.is_equivalent() != expect {
                errors.push(format!("{a} ~ {b}"));
            }
        }
    }
    board.record(
        "9",
        errors.is_empty(),
        format!("equivalence checker on 30 positive and 30 negative pairs: {} errors {errors:?}", errors.len()),
    );
}

fn suite(tasks: &[Task], cfg: &Config, rep: u64, typical: &HashMap<String, f64>, label: &str) -> SuiteSummary {
    let t = Instant::now();
    let opts = SuiteOptions { first_seed: 1 + 3 * rep, typical_secs: typical.clone(), ..SuiteOptions::default() };
    let s = run_tasks(tasks, cfg, &opts).expect("suite runs");
    println!("--- {label}, repetition {rep} ({:.0}s)", t.elapsed().as_secs_f64());
    print!("{}", s.to_text());
    s
}

fn sym_true(s: &SuiteSummary) -> usize {
    s.tasks.iter().map(|t| t.count(Outcome::SymTrue)).sum()
}

fn criteria_on_baseline(board: &mut Board, s: &SuiteSummary) {
    let recovered = s.tasks_recovered(2);
    let slowest = s.tasks.iter().flat_map(|t| &t.reports).map(|r| r.total_secs).fold(0.0, f64::max);
    board.record(
        "1",
        recovered >= 7 && slowest <= 600.0,
        format!("{recovered}/10 tasks sym-true in >=2 of 3 trials (need 7), slowest trial {slowest:.1}s (limit 600s)"),
    );

    let sym: Vec<_> = s.tasks.iter().flat_map(|t| &t.reports).filter(|r| r.outcome == Outcome::SymTrue).collect();
    let low: Vec<String> = sym
        .iter()
        .filter(|r| r.test_r2().is_none_or(|v| v <= 0.99))
        .map(|r| format!("{}/{}", r.task, r.seed))
        .collect();
    let min_r2 = sym.iter().filter_map(|r| r.test_r2()).fold(f64::INFINITY, f64::min);
    board.record(
        "2",
        !sym.is_empty() && low.is_empty(),
        format!("{} sym-true trials, minimum test R2 {min_r2:.6}, below 0.99: {low:?}", sym.len()),
    );

    let mut fidelity_fail = Vec::new();
    let mut worst: f64 = 0.0;
    let mut measured = 0;
    for r in s.tasks.iter().flat_map(|t| &t.reports) {
        match r.extraction_error {
            Some(e) => {
                measured += 1;
                worst = worst.max(e);
                if !(e < 1e-6) {
                    fidelity_fail.push(format!("{}/{}: {e:.2e}", r.task, r.seed));
                }
            }
            None if r.stage(lies::bench::Stage::Extract).status == lies::bench::StageStatus::Done => {
                fidelity_fail.push(format!("{}/{}: no unclipped samples", r.task, r.seed));
            }
            None => {}
        }
    }
    let tasks_covered = s.tasks.iter().filter(|t| t.reports.iter().any(|r| r.extraction_error.is_some())).count();
    board.record(
        "6",
        fidelity_fail.is_empty() && tasks_covered == s.tasks.len(),
        format!(
            "extraction fidelity on {measured} trials over {tasks_covered}/{} tasks: worst relative gap {worst:.2e} (limit 1e-6), failures {fidelity_fail:?}",
            s.tasks.len()
        ),
    );

    let mut worst_drop: f64 = f64::NEG_INFINITY;
    let mut bad = Vec::new();
    for r in &sym {
        let m = r.metrics.as_ref().expect("completed runs carry metrics");
        let drop = m.unrounded_test_r2 - m.test_r2;
        worst_drop = worst_drop.max(drop);
        if !(drop < 0.01) {
            bad.push(format!("{}/{}: {drop:.4}", r.task, r.seed));
        }
    }
    board.record(
        "7",
        !sym.is_empty() && bad.is_empty(),
        format!("rounding safety on {} sym-true trials: largest R2 drop {worst_drop:.2e} (limit 0.01), violations {bad:?}", sym.len()),
    );
}

fn criterion_3(board: &mut Board, tasks: &[Task], base_cfg: &Config, baselines: &[SuiteSummary]) {
    let (mut zero_ok, mut fit_ok, mut prune_ok) = (0, 0, 0);
    let mut lines = Vec::new();
    for (rep, base) in baselines.iter().enumerate() {
        let typical: HashMap<String, f64> =
            base.tasks.iter().filter_map(|t| t.typical_secs.map(|s| (t.task.clone(), s))).collect();
        let run = |edit: fn(&mut Config), label: &str| {
            let mut cfg = base_cfg.clone();
            edit(&mut cfg);
            suite(tasks, &cfg, rep as u64, &typical, label)
        };
        let no_zero = run(|c| c.stages.round_to_zero = false, "without round_to_zero");
        let no_fit = run(|c| c.stages.optimize_coefficients = false, "without optimize_coefficients");
        let no_prune = run(|c| c.stages.gradient_prune = false, "without gradient_prune");

        let base_true = sym_true(base);
        if sym_true(&no_zero) < base_true {
            zero_ok += 1;
        }
        if sym_true(&no_fit) < base_true {
            fit_ok += 1;
        }
        let ext = |s: &SuiteSummary| {
            median(s.tasks.iter().flat_map(|t| &t.reports).map(|r| r.extraction_secs()).collect())
        };
        let (m_base, m_np) = (ext(base), ext(&no_prune));
        let oot_tasks = no_prune.tasks.iter().filter(|t| t.count(Outcome::OutOfTime) > 0).count();
        if m_np >= 5.0 * m_base || oot_tasks >= 3 {
            prune_ok += 1;
        }
        lines.push(format!(
            "rep {rep}: sym-true base {base_true}, no-zero {}, no-fit {}; extraction median {:.3}s vs {:.3}s without pruning, {oot_tasks} tasks out of time",
            sym_true(&no_zero),
            sym_true(&no_fit),
            m_base,
            m_np
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    board.record(
        "3",
        zero_ok >= 2 && fit_ok >= 2 && prune_ok >= 2,
        format!(
            "ablation trends held on: round_to_zero {zero_ok}/3, optimize_coefficients {fit_ok}/3, gradient_prune {prune_ok}/3 repetitions (need 2 each)"
        ),
    );
}

fn main() {
    let started = Instant::now();
    let mut board = Board::default();
    criterion_4(&mut board);
    criterion_5(&mut board);
    criterion_8(&mut board);
    criterion_9(&mut board);

    let tasks = desk_suite();
    let cfg = Config::default();
    let none = HashMap::new();
    let baselines: Vec<SuiteSummary> = (0..3).map(|rep| suite(&tasks, &cfg, rep, &none, "baseline")).collect();
    criteria_on_baseline(&mut board, &baselines[0]);
    criterion_3(&mut board, &tasks, &cfg, &baselines);

    board.results.sort_by(|a, b| a.0.cmp(&b.0));
    let failed: Vec<&str> = board.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        board.results.len() - failed.len(),
        board.results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
