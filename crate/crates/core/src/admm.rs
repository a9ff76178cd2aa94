//! ADMM sparsification: RMSprop steps on the full objective, soft-threshold
//! Z-updates and dual U-updates, organised into weak and strong phases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::GradientSet;
use crate::losses::{objective, LossBreakdown, LossConfig, LossError, Proximity};
use crate::net::LiesNet;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdmmError {
    #[error("rho must be positive, got {0}")]
    NonPositiveRho(f64),
    #[error("invalid phase configuration: {0}")]
    Config(String),
    #[error("tensor shapes do not match the network")]
    ShapeMismatch,
    #[error("{phase:?} phase failed in epoch {epoch}: {source}")]
    Diverged { phase: PhaseKind, epoch: usize, source: LossError },
    #[error("non-finite parameters after {phase:?} epoch {epoch}")]
    NonFinite { phase: PhaseKind, epoch: usize },
    #[error("empty training set")]
    EmptyData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub kind: PhaseKind,
    pub epochs: usize,
    pub rho: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub decay: f64,
    pub eps: f64,
    /// Replace W by Z once the phase ends.
    pub project_on_finish: bool,
    /// When set, the learning rate follows a cosine from `lr` down to this
    /// value over the phase.
    pub lr_final: Option<f64>,
    pub loss: LossConfig,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig::weak()
    }
}

impl PhaseConfig {
    pub fn weak() -> Self {
        PhaseConfig {
            kind: PhaseKind::Weak,
            epochs: 20,
            rho: 0.5,
            lambda: 5e-4,
            lr: 1.5e-2,
            batch_size: 256,
            decay: 0.9,
            eps: 1e-8,
            project_on_finish: false,
            lr_final: None,
            loss: LossConfig::default(),
        }
    }

    /// Strong phase for an `n`-variable task: `λ = 5·10^-(n-1)`.
    pub fn strong(n: usize) -> Self {
        PhaseConfig {
            kind: PhaseKind::Strong,
            epochs: 30,
            rho: 0.005,
            lambda: strong_lambda(n),
            ..PhaseConfig::weak()
        }
    }

    pub fn validate(&self) -> Result<(), AdmmError> {
        if self.epochs == 0 {
            return Err(AdmmError::Config("epochs must be positive".into()));
        }
        if !(self.rho > 0.0) {
            return Err(AdmmError::NonPositiveRho(self.rho));
        }
        if !(self.lambda >= 0.0) {
            return Err(AdmmError::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(AdmmError::Config("learning rate and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.decay) || !(self.eps > 0.0) {
            return Err(AdmmError::Config("decay must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

pub fn strong_lambda(n: usize) -> f64 {
    5.0 * 10f64.powi(-(n as i32 - 1))
}

/// `sign(v)·max(|v| − t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn check_shapes(a: &[Tensor], b: &[Tensor]) -> Result<(), AdmmError> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_shape(y)) {
        return Err(AdmmError::ShapeMismatch);
    }
    Ok(())
}

/// `Z' = soft(W + U, λ/ρ)`.
pub fn z_update(w: &[Tensor], u: &[Tensor], lambda: f64, rho: f64) -> Result<Vec<Tensor>, AdmmError> {
    if !(rho > 0.0) {
        return Err(AdmmError::NonPositiveRho(rho));
    }
    check_shapes(w, u)?;
    let t = lambda / rho;
    Ok(w.iter()
        .zip(u)
        .map(|(a, b)| {
            Tensor::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| soft_threshold(x + y, t)).collect())
        })
        .collect())
}

/// `U' = U + W' − Z'`.
pub fn u_update(u: &[Tensor], w: &[Tensor], z: &[Tensor]) -> Result<Vec<Tensor>, AdmmError> {
    check_shapes(u, w)?;
    check_shapes(u, z)?;
    Ok(u.iter()
        .zip(w)
        .zip(z)
        .map(|((a, b), c)| {
            Tensor::from_vec(
                a.rows,
                a.cols,
                a.data.iter().zip(&b.data).zip(&c.data).map(|((x, y), v)| x + (y - v)).collect(),
            )
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub z: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub rho: f64,
    pub lambda: f64,
}

impl AdmmState {
    /// `Z = soft(W, λ/ρ)`, `U = 0`.
    pub fn init(net: &LiesNet, rho: f64, lambda: f64) -> Result<Self, AdmmError> {
        let u: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        let z = z_update(&net.params, &u, lambda, rho)?;
        Ok(AdmmState { z, u, rho, lambda })
    }

    /// `‖W − Z‖₂`.
    pub fn primal_residual(&self, net: &LiesNet) -> f64 {
        net.params
            .iter()
            .zip(&self.z)
            .map(|(w, z)| w.data.iter().zip(&z.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn nnz_z(&self) -> usize {
        self.z.iter().map(Tensor::nnz).sum()
    }
}

/// RMSprop accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Rmsprop {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    cache: Vec<Tensor>,
}

impl Rmsprop {
    pub fn new(net: &LiesNet, lr: f64, decay: f64, eps: f64) -> Self {
        Rmsprop { lr, decay, eps, cache: net.params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect() }
    }

    pub fn step(&mut self, net: &mut LiesNet, g: &GradientSet) {
        for ((p, c), gt) in net.params.iter_mut().zip(&mut self.cache).zip(&g.tensors) {
            for ((w, s), gi) in p.data.iter_mut().zip(&mut c.data).zip(&gt.data) {
                *s = self.decay * *s + (1.0 - self.decay) * gi * gi;
                *w -= self.lr * gi / (s.sqrt() + self.eps);
            }
        }
        net.enforce_dead();
    }
}

/// Training rows in transformed space.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub u: &'a [Vec<f64>],
    pub v: &'a [f64],
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// One epoch of shuffled mini-batch RMSprop on the full objective; returns
/// the sample-weighted average loss breakdown.
pub fn w_update_epoch(
    net: &mut LiesNet,
    data: TrainData<'_>,
    state: &AdmmState,
    cfg: &PhaseConfig,
    opt: &mut Rmsprop,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, LossError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut avg = LossBreakdown::default();
    let mut bu: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let mut bv: Vec<f64> = Vec::with_capacity(cfg.batch_size);
    for chunk in order.chunks(cfg.batch_size) {
        bu.clear();
        bv.clear();
        for &i in chunk {
            bu.push(data.u[i].clone());
            bv.push(data.v[i]);
        }
        let prox = Proximity { z: &state.z, u: &state.u, rho: state.rho };
        let obj = objective(net, &bu, &bv, Some(prox), &cfg.loss)?;
        let g = obj.gradients(net)?;
        opt.step(net, &g);
        avg.accumulate(&obj.breakdown, chunk.len() as f64 / data.len() as f64);
    }
    Ok(avg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: PhaseKind,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub primal_residual: f64,
    pub nnz_z: usize,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub net: LiesNet,
    pub state: AdmmState,
    pub log: Vec<EpochLog>,
}

/// Runs a full phase: per epoch one W-epoch, then one Z- and one U-update.
///
/// A divergent epoch is rolled back and retried once with half the learning
/// rate; a second divergence fails the phase.
pub fn run_phase(
    net: &LiesNet,
    data: TrainData<'_>,
    cfg: &PhaseConfig,
    seed: u64,
) -> Result<PhaseOutcome, AdmmError> {
    run_phase_with(net, data, cfg, seed, &mut || false).map(|(o, _)| o)
}

/// As [`run_phase`], polling `stop` between epochs; returns `true` as the
/// second element when the phase was interrupted.
pub fn run_phase_with(
    net: &LiesNet,
    data: TrainData<'_>,
    cfg: &PhaseConfig,
    seed: u64,
    stop: &mut dyn FnMut() -> bool,
) -> Result<(PhaseOutcome, bool), AdmmError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AdmmError::EmptyData);
    }
    let mut net = net.clone();
    let mut state = AdmmState::init(&net, cfg.rho, cfg.lambda)?;
    let mut opt = Rmsprop::new(&net, cfg.lr, cfg.decay, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut halved = false;
    for epoch in 0..cfg.epochs {
        if stop() {
            return Ok((PhaseOutcome { net, state, log }, true));
        }
        if let Some(lr_end) = cfg.lr_final {
            let t = epoch as f64 / (cfg.epochs.max(2) - 1) as f64;
            let base = if halved { 0.5 * cfg.lr } else { cfg.lr };
            opt.lr = lr_end + 0.5 * (base - lr_end) * (1.0 + (std::f64::consts::PI * t).cos());
        }
        let (snap_net, snap_opt, snap_rng) = (net.clone(), opt.clone(), rng.clone());
        let loss = match w_update_epoch(&mut net, data, &state, cfg, &mut opt, &mut rng) {
            Ok(l) => l,
            Err(LossError::Divergence(v)) if !halved => {
                log::warn!("{:?} epoch {epoch} diverged ({v:e}); halving the learning rate", cfg.kind);
                halved = true;
                net = snap_net;
                opt = snap_opt;
                rng = snap_rng;
                opt.lr *= 0.5;
                w_update_epoch(&mut net, data, &state, cfg, &mut opt, &mut rng)
                    .map_err(|source| AdmmError::Diverged { phase: cfg.kind, epoch, source })?
            }
            Err(source) => return Err(AdmmError::Diverged { phase: cfg.kind, epoch, source }),
        };
        if !net.params.iter().all(Tensor::all_finite) {
            return Err(AdmmError::NonFinite { phase: cfg.kind, epoch });
        }
        state.z = z_update(&net.params, &state.u, state.lambda, state.rho)?;
        state.u = u_update(&state.u, &net.params, &state.z)?;
        log.push(EpochLog {
            phase: cfg.kind,
            epoch,
            loss,
            primal_residual: state.primal_residual(&net),
            nnz_z: state.nnz_z(),
            lr: opt.lr,
        });
    }
    if cfg.project_on_finish {
        net.params = state.z.clone();
        net.enforce_dead();
    }
    Ok((PhaseOutcome { net, state, log }, false))
}
