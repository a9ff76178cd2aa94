//! End-to-end runs of the pipeline and the suite aggregation.

use std::time::Duration;

use lies::admm::{run_phase, PhaseKind, TrainData};
use lies::bench::{
    desk_suite, parse_suite, run_pipeline, run_pipeline_with, run_tasks, Config, Outcome, SuiteOptions, CANONICAL_STAGES,
};
use lies::deadline::Deadline;
use lies::net::{ActivationConfig, LiesNet};
use lies::sampling::{fit_apply_transform, generate, Task};

fn task(name: &str) -> Task {
    desk_suite().into_iter().find(|t| t.name == name).unwrap()
}

#[test]
fn product_is_recovered_with_unit_witness() {
    let r = run_pipeline(&task("product"), &Config::default(), 1);
    assert_eq!(r.outcome, Outcome::SymTrue, "{:?}", r.final_expr);
    let m = r.metrics.as_ref().unwrap();
    assert!((m.equivalence.scale - 1.0).abs() < 1e-6 && m.equivalence.offset.abs() < 1e-6);
    assert!(m.test_r2 > 0.99);
    assert_eq!(r.stage_list(), CANONICAL_STAGES);
    assert!(r.extraction_error.unwrap() < 1e-6);
    let s = r.sparsity.as_ref().unwrap();
    assert!(s.prune_r2 > 0.999 && s.nnz_z_after_strong <= s.nnz_before_strong);
}

#[test]
fn zero_deadline_is_out_of_time() {
    let r = run_pipeline_with(&task("product"), &Config::default(), 1, Deadline::after(Duration::ZERO));
    assert_eq!(r.outcome, Outcome::OutOfTime);
    assert!(r.metrics.is_none() && r.final_expr.is_none());
    assert_eq!(r.stage_list(), CANONICAL_STAGES);

    let cfg = Config { typical_runtime_secs: Some(0.0), ..Config::default() };
    assert_eq!(run_pipeline(&task("ratio"), &cfg, 2).outcome, Outcome::OutOfTime);
}

#[test]
fn identical_inputs_give_identical_reports() {
    let t = task("double_ratio");
    let a = run_pipeline(&t, &Config::default(), 3);
    let b = run_pipeline(&t, &Config::default(), 3);
    assert!(a.final_expr.is_some());
    assert_eq!(a.final_expr, b.final_expr);
    assert_eq!(serde_json::to_string(&a.without_timings()).unwrap(), serde_json::to_string(&b.without_timings()).unwrap());
}

#[test]
fn invalid_config_fails_without_panicking() {
    let cfg = Config { test_fraction: 1.5, ..Config::default() };
    let r = run_pipeline(&task("product"), &cfg, 1);
    assert_eq!(r.outcome, Outcome::Failed);
    assert!(r.failure.as_deref().unwrap().contains("test_fraction"));
    assert_eq!(r.stage_list(), CANONICAL_STAGES);
}

#[test]
fn smoke_suite_rates_match_a_recount_of_the_json() {
    let tasks = parse_suite(
        "[[task]]\nname = \"product\"\nformula = \"x1*x2\"\nranges = [[1.0, 5.0], [1.0, 5.0]]\n\
         [[task]]\nname = \"geometric_mean\"\nformula = \"(x1*x2)^0.5\"\nranges = [[1.0, 5.0], [1.0, 5.0]]\n",
    )
    .unwrap();
    let s = run_tasks(&tasks, &Config::default(), &SuiteOptions::default()).unwrap();
    assert_eq!(s.ssr, 1.0);
    assert!(s.all_completed());

    let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
    let runs: Vec<&serde_json::Value> =
        v["tasks"].as_array().unwrap().iter().flat_map(|t| t["reports"].as_array().unwrap()).collect();
    let hits = runs.iter().filter(|r| r["outcome"] == "sym-true").count();
    let accurate = runs.iter().filter(|r| r["metrics"]["test_r2"].as_f64().is_some_and(|x| x > 0.99)).count();
    assert_eq!(runs.len(), 6);
    assert_eq!(s.ssr, hits as f64 / runs.len() as f64);
    assert_eq!(s.r2_rate, accurate as f64 / runs.len() as f64);
    let csv = s.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("product,3,3,0,0,0,1.0000"));
}

#[test]
fn strong_phase_settles_and_fits_a_toy_task() {
    let t = Task::new("toy", "3*x1", vec![(1.0, 5.0)], 600).unwrap();
    let ds = generate(&t, 600, 7).unwrap();
    let (tr, _) = fit_apply_transform(&ds).unwrap();
    let data = TrainData { u: &tr.u, v: &tr.v };
    let cfg = Config::default();
    let net = LiesNet::with_config(1, 2, 7, ActivationConfig::default(), cfg.init_scale).unwrap();
    let weak = run_phase(&net, data, &cfg.weak.to_phase(PhaseKind::Weak, 1, &cfg.loss), 7).unwrap();
    let strong = run_phase(&weak.net, data, &cfg.strong.to_phase(PhaseKind::Strong, 1, &cfg.loss), 8).unwrap();
    let exp_loss = strong.log.last().unwrap().loss.exp_loss;
    assert!(exp_loss < 1.005, "exponential loss {exp_loss}");
    let tail: Vec<f64> = strong.log.iter().rev().take(5).rev().map(|l| l.primal_residual).collect();
    for w in tail.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "residual rose: {tail:?}");
    }
    assert!(strong.state.nnz_z() <= weak.net.nnz());
}
