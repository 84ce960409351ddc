//! Desk-scale STE trainer: latent real carriers, hard-sign forward, smooth-sign
//! backward, trained on a synthetic frozen-base regression task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::adapter::{AdapterError, LordbaAdapter, ScaleEnvelope, SignMatrix};
use crate::ptq::{delta_dense, scale_sweep_dense};
use crate::tensor::{solve_spd, DenseMatrix, TensorError};

#[derive(Debug, Error)]
pub enum QatError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mode {0:?} needs an init adapter; Scratch needs a random init")]
    InitMismatch(QatMode),
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QatMode {
    /// Train latent carriers and scales.
    Full,
    /// Carriers stay bit-identical to the init; only scales move.
    Freeze,
    /// Random latent init, no adapter required.
    Scratch,
}

/// Forward-pass treatment of the carriers. `Hard` is the production path
/// (sign(H) forward, smooth-sign backward). `Tanh` replaces sign by tanh(κ·)
/// in the forward too, making the backward pass the exact gradient — used by
/// the finite-difference checks to certify the chain rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarrierRelaxation {
    Hard,
    Tanh,
}

#[derive(Debug, Clone)]
pub struct QatConfig {
    pub mode: QatMode,
    /// Smooth-sign temperature.
    pub kappa: f64,
    pub steps: usize,
    /// None picks the per-mode default: 2e-4 for Scratch, 5e-5 otherwise.
    pub lr: Option<f64>,
    /// Fraction of steps spent on linear warm-up before the cosine decay.
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Optional linear ramp of κ from κ/10 to κ over the run (off by default;
    /// the constant-κ schedule is the documented one).
    pub kappa_ramp: bool,
    pub seed: u64,
}

impl QatConfig {
    pub fn new(mode: QatMode, steps: usize) -> Self {
        QatConfig {
            mode,
            kappa: 100.0,
            steps,
            lr: None,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            kappa_ramp: false,
            seed: 0,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.mode {
            QatMode::Scratch => 2e-4,
            QatMode::Full | QatMode::Freeze => 5e-5,
        })
    }

    pub fn validate(&self) -> Result<(), QatError> {
        if !(self.kappa > 0.0) {
            return Err(QatError::InvalidConfig(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(QatError::InvalidConfig(format!(
                "warmup_frac must lie in [0,1], got {}",
                self.warmup_frac
            )));
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0) {
                return Err(QatError::InvalidConfig(format!("lr must be >= 0, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(QatError::InvalidConfig("moment decays must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Learning rate at 0-based step t: linear warm-up to the peak over the
    /// first ceil(warmup_frac·steps) steps, then cosine decay toward zero.
    pub fn lr_at(&self, t: usize) -> f64 {
        let peak = self.effective_lr();
        let warm = ((self.warmup_frac * self.steps as f64).ceil() as usize).min(self.steps);
        if t < warm {
            return peak * (t + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = (t - warm) as f64 / span;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    fn kappa_at(&self, t: usize) -> f64 {
        if !self.kappa_ramp || self.steps <= 1 {
            return self.kappa;
        }
        let lo = self.kappa / 10.0;
        lo + (self.kappa - lo) * t as f64 / (self.steps - 1) as f64
    }
}

/// Fixed-base regression instance: inputs X (T×N), targets Y (T×M), frozen
/// base W0 (N×M). The trainer fits only the adapter beside W0.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
    pub w0: DenseMatrix,
}

impl ToyTask {
    pub fn new(x: DenseMatrix, y: DenseMatrix, w0: DenseMatrix) -> Result<Self, QatError> {
        if x.rows() != y.rows() || x.cols() != w0.rows() || y.cols() != w0.cols() {
            return Err(QatError::ShapeMismatch(format!(
                "X {}x{}, Y {}x{}, W0 {}x{}",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols(),
                w0.rows(),
                w0.cols()
            )));
        }
        if x.rows() == 0 {
            return Err(QatError::ShapeMismatch("need at least one sample".into()));
        }
        Ok(ToyTask { x, y, w0 })
    }

    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    /// Loss of the base model alone (zero adapter).
    pub fn base_loss(&self) -> f64 {
        let r = self.x.matmul(&self.w0).sub(&self.y);
        0.5 * r.frob_norm().powi(2) / self.samples() as f64
    }

    /// Realizable planted instance: hidden adapter θ̄ with random carriers,
    /// α,γ ~ U(0.7,1.3) and β ~ ±U(0.5,1.5)·0.1 (halved per extra envelope),
    /// Gaussian X and base W0, targets Y = X·(W0 + ΔW(θ̄)) exactly.
    pub fn planted(
        n: usize,
        m: usize,
        r: usize,
        l: usize,
        samples: usize,
        seed: u64,
    ) -> (ToyTask, LordbaAdapter) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let b1 = SignMatrix::from_fn(n, r, |_, _| rng.random::<bool>());
        let b2 = SignMatrix::from_fn(r, m, |_, _| rng.random::<bool>());
        let mut envelopes = Vec::with_capacity(l);
        for e in 0..l {
            let mut env = ScaleEnvelope::ones(n, r, m);
            for a in env.alpha.iter_mut() {
                *a = rng.random_range(0.7..1.3);
            }
            for g in env.gamma.iter_mut() {
                *g = rng.random_range(0.7..1.3);
            }
            let mag = 0.1 * 0.5f64.powi(e as i32);
            for b in env.beta.iter_mut() {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                *b = s * mag * rng.random_range(0.5..1.5);
            }
            envelopes.push(env);
        }
        let hidden = LordbaAdapter::new(b1, b2, envelopes, r).expect("planted shapes are consistent");
        let scale = 1.0 / (n as f64).sqrt();
        let w0 = DenseMatrix::from_fn(n, m, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        });
        let x = DenseMatrix::from_fn(samples, n, |_, _| StandardNormal.sample(&mut rng));
        let y = x.matmul(&w0.add(&hidden.reconstruct()));
        (ToyTask { x, y, w0 }, hidden)
    }
}

/// First/second Adam moments for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    fn zeros(len: usize) -> Self {
        AdamMoments { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// Gradients mirroring the trainable parameters. Scale gradients reuse the
/// envelope layout.
#[derive(Debug, Clone)]
pub struct QatGradients {
    pub h1: DenseMatrix,
    pub h2: DenseMatrix,
    pub envelopes: Vec<ScaleEnvelope>,
}

/// Trainer state: latent carriers (sign gives the exported bits), fp scales,
/// optimizer moments in the order [H1, H2, α⁽⁰⁾, β⁽⁰⁾, γ⁽⁰⁾, α⁽¹⁾, ...].
#[derive(Debug, Clone)]
pub struct QatState {
    pub h1: DenseMatrix,
    pub h2: DenseMatrix,
    pub envelopes: Vec<ScaleEnvelope>,
    pub moments: Vec<AdamMoments>,
    pub step: usize,
    pub loss_history: Vec<f64>,
    pub r0_ref: usize,
}

impl QatState {
    fn fresh_moments(n: usize, r: usize, m: usize, l: usize) -> Vec<AdamMoments> {
        let mut mom = vec![AdamMoments::zeros(n * r), AdamMoments::zeros(r * m)];
        for _ in 0..l {
            mom.push(AdamMoments::zeros(n));
            mom.push(AdamMoments::zeros(r));
            mom.push(AdamMoments::zeros(m));
        }
        mom
    }

    /// Latent init from a binary adapter: H = B/κ, so κ|H| = 1 sits where the
    /// smooth-sign derivative is responsive (at H = B the surrogate κ·sech²(κ)
    /// underflows and carriers could never flip).
    pub fn from_adapter(adapter: &LordbaAdapter, kappa: f64) -> Self {
        let (n, r, m) = (adapter.n(), adapter.carrier_rank(), adapter.m());
        let inv = 1.0 / kappa;
        QatState {
            h1: adapter.b1.to_dense().scaled(inv),
            h2: adapter.b2.to_dense().scaled(inv),
            envelopes: adapter.envelopes.clone(),
            moments: Self::fresh_moments(n, r, m, adapter.num_envelopes()),
            step: 0,
            loss_history: Vec::new(),
            r0_ref: adapter.r0_ref,
        }
    }

    /// Random init: H ~ N(0,1) entrywise; first envelope fit by one
    /// closed-form scale sweep against the task's least-squares delta, extra
    /// envelopes zeroed.
    pub fn scratch(
        task: &ToyTask,
        carrier_rank: usize,
        envelope_rank: usize,
        r0_ref: usize,
        seed: u64,
    ) -> Result<Self, QatError> {
        if carrier_rank == 0 || envelope_rank == 0 || r0_ref == 0 {
            return Err(QatError::InvalidConfig("ranks must be >= 1".into()));
        }
        let (n, m) = (task.x.cols(), task.y.cols());
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h1 = DenseMatrix::from_fn(n, carrier_rank, |_, _| StandardNormal.sample(&mut rng));
        let h2 = DenseMatrix::from_fn(carrier_rank, m, |_, _| StandardNormal.sample(&mut rng));
        let mut envelopes = vec![ScaleEnvelope::ones(n, carrier_rank, m)];
        for _ in 1..envelope_rank {
            envelopes.push(ScaleEnvelope::zeros(n, carrier_rank, m));
        }
        let target = least_squares_delta(task)?;
        let s1 = SignMatrix::from_dense(&h1).to_dense();
        let s2 = SignMatrix::from_dense(&h2).to_dense();
        scale_sweep_dense(&target, &s1, &s2, &mut envelopes);
        Ok(QatState {
            h1,
            h2,
            envelopes,
            moments: Self::fresh_moments(n, carrier_rank, m, envelope_rank),
            step: 0,
            loss_history: Vec::new(),
            r0_ref,
        })
    }

    pub fn n(&self) -> usize {
        self.h1.rows()
    }

    pub fn m(&self) -> usize {
        self.h2.cols()
    }

    pub fn carrier_rank(&self) -> usize {
        self.h1.cols()
    }

    /// Parameters the optimizer actually moves in the given mode.
    pub fn trainable_params(&self, mode: QatMode) -> usize {
        let (n, r, m) = (self.n(), self.carrier_rank(), self.m());
        let scales = self.envelopes.len() * (n + r + m);
        match mode {
            QatMode::Freeze => scales,
            QatMode::Full | QatMode::Scratch => r * (n + m) + scales,
        }
    }

    /// Snapshot the binarized adapter.
    pub fn export(&self) -> Result<LordbaAdapter, QatError> {
        Ok(LordbaAdapter::new(
            SignMatrix::from_dense(&self.h1),
            SignMatrix::from_dense(&self.h2),
            self.envelopes.clone(),
            self.r0_ref,
        )?)
    }
}

/// Ridge-stabilized least-squares fit of the adapter target:
/// argmin_Δ ‖(Y − X·W0) − X·Δ‖²_F.
fn least_squares_delta(task: &ToyTask) -> Result<DenseMatrix, QatError> {
    let xt = task.x.transpose();
    let mut gram = xt.matmul(&task.x);
    let n = gram.rows();
    let jitter = 1e-12 * (0..n).map(|i| gram.get(i, i)).sum::<f64>().max(1e-300) / n as f64;
    for i in 0..n {
        gram.set(i, i, gram.get(i, i) + jitter);
    }
    let rhs = xt.matmul(&task.y.sub(&task.x.matmul(&task.w0)));
    let mut delta = DenseMatrix::zeros(n, rhs.cols());
    for j in 0..rhs.cols() {
        let col = solve_spd(&gram, &rhs.col(j))?;
        for i in 0..n {
            delta.set(i, j, col[i]);
        }
    }
    Ok(delta)
}

fn carrier_dense(h: &DenseMatrix, relax: CarrierRelaxation, kappa: f64) -> DenseMatrix {
    match relax {
        CarrierRelaxation::Hard => {
            DenseMatrix::from_fn(h.rows(), h.cols(), |i, j| if h.get(i, j) >= 0.0 { 1.0 } else { -1.0 })
        }
        CarrierRelaxation::Tanh => {
            DenseMatrix::from_fn(h.rows(), h.cols(), |i, j| (kappa * h.get(i, j)).tanh())
        }
    }
}

/// κ·sech²(κu), evaluated as κ·4t/(1+t)² with t = exp(−2|κu|) so large |κu|
/// underflows cleanly to 0 instead of producing 1 − tanh² cancellation noise.
pub fn smooth_sign_derivative(u: f64, kappa: f64) -> f64 {
    let t = (-2.0 * (kappa * u).abs()).exp();
    kappa * 4.0 * t / ((1.0 + t) * (1.0 + t))
}

fn forward_with(
    state: &QatState,
    task: &ToyTask,
    relax: CarrierRelaxation,
    kappa: f64,
) -> (f64, DenseMatrix) {
    let s1 = carrier_dense(&state.h1, relax, kappa);
    let s2 = carrier_dense(&state.h2, relax, kappa);
    let dw = delta_dense(&s1, &s2, &state.envelopes);
    let yhat = task.x.matmul(&task.w0.add(&dw));
    let resid = yhat.sub(&task.y);
    let loss = 0.5 * resid.frob_norm().powi(2) / task.samples() as f64;
    (loss, yhat)
}

/// Production forward: hard signs inside ΔW, per-sample mean-square loss
/// ½‖Y − X(W0+ΔW)‖²_F / T.
pub fn qat_forward(state: &QatState, task: &ToyTask) -> (f64, DenseMatrix) {
    forward_with(state, task, CarrierRelaxation::Hard, 1.0)
}

/// Loss with tanh(κ·)-relaxed carriers; the differentiable surrogate the
/// finite-difference oracle probes.
pub fn relaxed_loss(state: &QatState, task: &ToyTask, kappa: f64) -> f64 {
    forward_with(state, task, CarrierRelaxation::Tanh, kappa).0
}

/// Reverse-mode gradients. Scale gradients are exact for the chosen forward;
/// carrier gradients pass through κ·sech²(κH) — the smooth-sign surrogate
/// under `Hard`, the exact tanh Jacobian under `Tanh`.
pub fn qat_backward(
    state: &QatState,
    task: &ToyTask,
    kappa: f64,
    relax: CarrierRelaxation,
) -> QatGradients {
    let s1 = carrier_dense(&state.h1, relax, kappa);
    let s2 = carrier_dense(&state.h2, relax, kappa);
    let t = task.samples() as f64;

    let dw = delta_dense(&s1, &s2, &state.envelopes);
    let resid = task.x.matmul(&task.w0.add(&dw)).sub(&task.y);
    // G = ∂loss/∂ΔW.
    let g = task.x.transpose().matmul(&resid).scaled(1.0 / t);

    let (n, m) = (g.rows(), g.cols());
    let r = state.carrier_rank();
    let mut ds1 = DenseMatrix::zeros(n, r);
    let mut ds2 = DenseMatrix::zeros(r, m);
    let mut genv = Vec::with_capacity(state.envelopes.len());
    for env in &state.envelopes {
        // Shared core S₁D_βS₂ feeds both diagonal-scale gradients.
        let core = s1.scale_cols(&env.beta).matmul(&s2);
        let mut ge = ScaleEnvelope::zeros(n, r, m);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..m {
                acc += g.get(i, j) * core.get(i, j) * env.gamma[j];
            }
            ge.alpha[i] = acc;
        }
        for j in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                acc += g.get(i, j) * env.alpha[i] * core.get(i, j);
            }
            ge.gamma[j] = acc;
        }
        // dβ_k = ((D_αS₁)ᵀ·G·(S₂D_γ)ᵀ)_kk via two R×M row sets.
        let left = s1.scale_rows(&env.alpha).transpose().matmul(&g);
        let right = s2.scale_cols(&env.gamma);
        for k in 0..r {
            let mut acc = 0.0;
            for j in 0..m {
                acc += left.get(k, j) * right.get(k, j);
            }
            ge.beta[k] = acc;
        }
        ds1.add_assign(&g.matmul(&s2.scale_rows(&env.beta).scale_cols(&env.gamma).transpose()).scale_rows(&env.alpha));
        ds2.add_assign(&s1.scale_rows(&env.alpha).scale_cols(&env.beta).transpose().matmul(&g).scale_cols(&env.gamma));
        genv.push(ge);
    }

    let gh1 = DenseMatrix::from_fn(n, r, |i, j| {
        ds1.get(i, j) * smooth_sign_derivative(state.h1.get(i, j), kappa)
    });
    let gh2 = DenseMatrix::from_fn(r, m, |i, j| {
        ds2.get(i, j) * smooth_sign_derivative(state.h2.get(i, j), kappa)
    });
    QatGradients { h1: gh1, h2: gh2, envelopes: genv }
}

/// Decoupled-weight-decay adaptive-moment update on one parameter group.
fn adamw_group(
    p: &mut [f64],
    grad: &[f64],
    mom: &mut AdamMoments,
    lr: f64,
    cfg: &QatConfig,
    step: usize,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..p.len() {
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * grad[i];
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = mom.m[i] / bc1;
        let vhat = mom.v[i] / bc2;
        p[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
    }
}

/// One optimizer step over every trainable group. `update_carriers = false`
/// (Freeze) leaves H1/H2 and their moments untouched.
pub fn optimizer_step(
    state: &mut QatState,
    grads: &QatGradients,
    lr: f64,
    cfg: &QatConfig,
    update_carriers: bool,
) {
    state.step += 1;
    let step = state.step;
    if update_carriers {
        let (mh1, rest) = state.moments.split_at_mut(1);
        let (mh2, _) = rest.split_at_mut(1);
        adamw_group(state.h1.data_mut(), grads.h1.data(), &mut mh1[0], lr, cfg, step);
        adamw_group(state.h2.data_mut(), grads.h2.data(), &mut mh2[0], lr, cfg, step);
    }
    for (e, genv) in grads.envelopes.iter().enumerate() {
        let base = 2 + 3 * e;
        let env = &mut state.envelopes[e];
        adamw_group(&mut env.alpha, &genv.alpha, &mut state.moments[base], lr, cfg, step);
        adamw_group(&mut env.beta, &genv.beta, &mut state.moments[base + 1], lr, cfg, step);
        adamw_group(&mut env.gamma, &genv.gamma, &mut state.moments[base + 2], lr, cfg, step);
    }
}

/// Init source for `train`: a compressed adapter (Full/Freeze) or a random
/// latent shape (Scratch).
#[derive(Debug, Clone, Copy)]
pub enum QatInit<'a> {
    Adapter(&'a LordbaAdapter),
    Random { carrier_rank: usize, envelope_rank: usize, r0_ref: usize },
}

/// Run the configured number of optimizer steps and export the binarized
/// adapter. The base W0 is read-only throughout. `loss_history` records the
/// hard-sign loss before each step plus the final loss.
pub fn train(
    task: &ToyTask,
    init: QatInit,
    config: &QatConfig,
) -> Result<(LordbaAdapter, QatState), QatError> {
    config.validate()?;
    let mut state = match (config.mode, init) {
        (QatMode::Full | QatMode::Freeze, QatInit::Adapter(adapter)) => {
            if adapter.n() != task.x.cols() || adapter.m() != task.y.cols() {
                return Err(QatError::ShapeMismatch(format!(
                    "adapter is {}x{}, task wants {}x{}",
                    adapter.n(),
                    adapter.m(),
                    task.x.cols(),
                    task.y.cols()
                )));
            }
            QatState::from_adapter(adapter, config.kappa)
        }
        (QatMode::Scratch, QatInit::Random { carrier_rank, envelope_rank, r0_ref }) => {
            QatState::scratch(task, carrier_rank, envelope_rank, r0_ref, config.seed)?
        }
        (mode, _) => return Err(QatError::InitMismatch(mode)),
    };
    let update_carriers = config.mode != QatMode::Freeze;

    for t in 0..config.steps {
        let kappa = config.kappa_at(t);
        let (loss, _) = qat_forward(&state, task);
        if !loss.is_finite() {
            return Err(QatError::Diverged(t));
        }
        state.loss_history.push(loss);
        let mut grads = qat_backward(&state, task, kappa, CarrierRelaxation::Hard);
        if !update_carriers {
            // Freeze trains ℓ(N+R+M) scales only.
            grads.h1 = DenseMatrix::zeros(state.h1.rows(), state.h1.cols());
            grads.h2 = DenseMatrix::zeros(state.h2.rows(), state.h2.cols());
        }
        optimizer_step(&mut state, &grads, config.lr_at(t), config, update_carriers);
    }
    let (final_loss, _) = qat_forward(&state, task);
    if !final_loss.is_finite() {
        return Err(QatError::Diverged(config.steps));
    }
    state.loss_history.push(final_loss);
    let adapter = state.export()?;
    Ok((adapter, state))
}

/// Hard-sign toy loss of a standalone adapter (used to compare PTQ inits
/// against trained results).
pub fn adapter_toy_loss(adapter: &LordbaAdapter, task: &ToyTask) -> f64 {
    let yhat = task.x.matmul(&task.w0.add(&adapter.reconstruct()));
    0.5 * yhat.sub(&task.y).frob_norm().powi(2) / task.samples() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_task(seed: u64) -> (ToyTask, LordbaAdapter) {
        ToyTask::planted(6, 5, 2, 1, 24, seed)
    }

    #[test]
    fn zero_beta_gives_base_loss() {
        let (task, hidden) = tiny_task(1);
        let mut state = QatState::from_adapter(&hidden, 100.0);
        for env in &mut state.envelopes {
            env.beta.iter_mut().for_each(|b| *b = 0.0);
        }
        let (loss, _) = qat_forward(&state, &task);
        assert!((loss - task.base_loss()).abs() <= 1e-12 * task.base_loss().max(1.0));
    }

    #[test]
    fn realizable_target_gives_zero_loss() {
        let (task, hidden) = tiny_task(2);
        // Target was generated from the hidden adapter's exact reconstruction.
        let state = QatState::from_adapter(&hidden, 100.0);
        let (loss, _) = qat_forward(&state, &task);
        assert!(loss <= 1e-22, "loss {loss}");
    }

    #[test]
    fn forward_matches_direct_composition() {
        let (task, hidden) = tiny_task(3);
        let state = QatState::from_adapter(&hidden, 100.0);
        let (loss, yhat) = qat_forward(&state, &task);
        let manual = task.x.matmul(&task.w0.add(&hidden.reconstruct()));
        assert!(yhat.sub(&manual).max_abs() <= 1e-12);
        let direct = 0.5 * manual.sub(&task.y).frob_norm().powi(2) / task.samples() as f64;
        assert!((loss - direct).abs() <= 1e-12 * (1.0 + direct));
    }

    #[test]
    fn ste_factor_saturates_and_peaks() {
        assert!(smooth_sign_derivative(1e6, 100.0) == 0.0);
        assert!(smooth_sign_derivative(-1e6, 100.0) == 0.0);
        let peak = smooth_sign_derivative(0.0, 100.0);
        assert!((peak - 100.0).abs() <= 1e-12);
        // Matches the naive formula where that formula is still accurate.
        let u = 0.007;
        let naive = 100.0 * (1.0 - (100.0f64 * u).tanh().powi(2));
        assert!((smooth_sign_derivative(u, 100.0) - naive).abs() <= 1e-10 * naive);
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let (task, hidden) = tiny_task(4);
        let mut state = QatState::from_adapter(&hidden, 100.0);
        let before = state.clone();
        let zero = QatGradients {
            h1: DenseMatrix::zeros(state.h1.rows(), state.h1.cols()),
            h2: DenseMatrix::zeros(state.h2.rows(), state.h2.cols()),
            envelopes: vec![ScaleEnvelope::zeros(state.n(), state.carrier_rank(), state.m())],
        };
        let cfg = QatConfig::new(QatMode::Full, 10);
        optimizer_step(&mut state, &zero, 1e-3, &cfg, true);
        assert_eq!(state.h1, before.h1);
        assert_eq!(state.h2, before.h2);
        assert_eq!(state.envelopes, before.envelopes);
        let _ = task;
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let cfg = QatConfig::new(QatMode::Full, 100);
        // 5 warm-up steps at 100 steps total.
        assert!((cfg.lr_at(0) - cfg.effective_lr() / 5.0).abs() <= 1e-18);
        assert!((cfg.lr_at(4) - cfg.effective_lr()).abs() <= 1e-18);
        assert!((cfg.lr_at(5) - cfg.effective_lr()).abs() <= 1e-18);
        assert!(cfg.lr_at(99) < cfg.lr_at(50));
        assert!(cfg.lr_at(99) > 0.0);
        assert!(cfg.lr_at(99) < 0.01 * cfg.effective_lr());
    }

    #[test]
    fn freeze_mode_counts_only_scales() {
        let (_, hidden) = tiny_task(5);
        let state = QatState::from_adapter(&hidden, 100.0);
        assert_eq!(state.trainable_params(QatMode::Freeze), 6 + 2 + 5);
        assert_eq!(state.trainable_params(QatMode::Full), 2 * (6 + 5) + 6 + 2 + 5);
    }

    #[test]
    fn scratch_extra_envelopes_start_zero() {
        let (task, _) = ToyTask::planted(8, 7, 3, 1, 32, 6);
        let state = QatState::scratch(&task, 3, 2, 3, 9).unwrap();
        assert!(state.envelopes[1].alpha.iter().all(|&v| v == 0.0));
        assert!(state.envelopes[1].beta.iter().all(|&v| v == 0.0));
        // First envelope picked up something from the closed-form sweep.
        assert!(state.envelopes[0].beta.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_mode_mismatch_is_rejected() {
        let (task, hidden) = tiny_task(7);
        let cfg = QatConfig::new(QatMode::Scratch, 1);
        assert!(matches!(train(&task, QatInit::Adapter(&hidden), &cfg), Err(QatError::InitMismatch(_))));
        let cfg = QatConfig::new(QatMode::Full, 1);
        let init = QatInit::Random { carrier_rank: 2, envelope_rank: 1, r0_ref: 2 };
        assert!(matches!(train(&task, init, &cfg), Err(QatError::InitMismatch(_))));
    }
}
