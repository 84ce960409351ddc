//! Training-free compression of a dense update into a double-binary adapter
//! by scaled consensus ADMM.
//!
//! Split form: minimize ½‖T − ΔW(U₁,U₂; scales)‖²_F subject to U_k = M_k with
//! M_k constrained to ±1. Per sweep: Tikhonov least-squares on each carrier
//! block (Gauss–Seidel), one closed-form scale pass, sign projection with a
//! scaled dual, then Boyd residual balancing on ρ for the first half of the
//! sweep budget. The penalty is normalized per block as ρ̃_k = ρ/n_k with
//! n₁ = N·R, n₂ = R·M.

use crate::adapter::{LordbaAdapter, ScaleEnvelope, SignMatrix};
use crate::tensor::{pinv_solve, solve_spd, thin_svd, DenseMatrix, TensorError};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PtqError {
    #[error("target matrix is identically zero; nothing to compress")]
    ZeroTarget,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite values during sweep {sweep}: {what}")]
    NonFinite { sweep: usize, what: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] crate::adapter::AdapterError),
}

#[derive(Debug, Clone)]
pub struct AdmmConfig {
    /// Carrier rank R of the two sign matrices.
    pub carrier_rank: usize,
    /// Number of scale envelopes ℓ.
    pub envelope_rank: usize,
    /// Sweep budget K; the penalty is frozen after K/2.
    pub max_sweeps: usize,
    /// Penalty multiplier for residual balancing.
    pub tau: f64,
    /// Residual ratio that triggers a penalty change.
    pub mu: f64,
    /// Allow early exit once the carriers are stable in the fixed-penalty tail.
    pub freeze_detect: bool,
    /// Reference LoRA rank stamped on the exported adapter (defaults to R).
    pub r0_ref: Option<usize>,
}

impl AdmmConfig {
    pub fn new(carrier_rank: usize) -> Self {
        AdmmConfig {
            carrier_rank,
            envelope_rank: 1,
            max_sweeps: 100,
            tau: 2.0,
            mu: 10.0,
            freeze_detect: true,
            r0_ref: None,
        }
    }

    /// Sweep index from which ρ stays fixed (and freeze-exit is allowed).
    pub fn rho_schedule_cutoff(&self) -> usize {
        self.max_sweeps / 2
    }

    fn validate(&self, n: usize, m: usize) -> Result<(), PtqError> {
        if self.carrier_rank < 1 || self.carrier_rank > n.min(m) {
            return Err(PtqError::InvalidConfig(format!(
                "carrier rank {} outside 1..=min({n},{m})",
                self.carrier_rank
            )));
        }
        if self.envelope_rank < 1 {
            return Err(PtqError::InvalidConfig("envelope rank must be >= 1".into()));
        }
        if self.max_sweeps < 1 {
            return Err(PtqError::InvalidConfig("sweep budget must be >= 1".into()));
        }
        if !(self.tau > 1.0) || !(self.mu > 1.0) {
            return Err(PtqError::InvalidConfig(format!("need tau > 1 and mu > 1, got ({}, {})", self.tau, self.mu)));
        }
        Ok(())
    }
}

/// Which carrier block a u-step updates; block 1 always runs first in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarrierBlock {
    First,
    Second,
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub u1: DenseMatrix,
    pub u2: DenseMatrix,
    pub m1: SignMatrix,
    pub m2: SignMatrix,
    pub y1: DenseMatrix,
    pub y2: DenseMatrix,
    pub envelopes: Vec<ScaleEnvelope>,
    pub rho: f64,
    /// 1-based index of the sweep currently being (or last) executed; 0 before the first.
    pub sweep: usize,
    /// ½‖T − ΔW(M, scales)‖²_F after the warm start and after every sweep.
    pub objective_history: Vec<f64>,
    /// Normalized residual of the per-sweep dual identity
    /// ρY_k + n_k·∇f(U_k) + ρ·ΔM_k = 0, max over blocks.
    pub dual_identity_history: Vec<f64>,
    /// Last sweep whose projection changed a carrier sign (0 = never), set
    /// once the run confirms the carriers stayed fixed through the tail.
    pub freeze_sweep: Option<usize>,
    /// Last sweep at which either M changed (bookkeeping for freeze_sweep).
    pub last_m_change: usize,
    /// Sign flips per block in the most recent projection.
    pub flips_last_sweep: (usize, usize),
}

impl AdmmState {
    pub fn n(&self) -> usize {
        self.u1.rows()
    }

    pub fn m(&self) -> usize {
        self.u2.cols()
    }

    pub fn carrier_rank(&self) -> usize {
        self.u1.cols()
    }

    fn n1(&self) -> f64 {
        (self.u1.rows() * self.u1.cols()) as f64
    }

    fn n2(&self) -> f64 {
        (self.u2.rows() * self.u2.cols()) as f64
    }

    fn is_finite(&self) -> bool {
        self.u1.is_finite()
            && self.u2.is_finite()
            && self.y1.is_finite()
            && self.y2.is_finite()
            && self.rho.is_finite()
            && self.envelopes.iter().all(|e| e.is_finite())
    }
}

/// ΔW for dense carrier matrices (used for latent U as well as sign M).
pub fn delta_dense(c1: &DenseMatrix, c2: &DenseMatrix, envelopes: &[ScaleEnvelope]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(c1.rows(), c2.cols());
    for env in envelopes {
        let contrib = c1.scale_cols(&env.beta).matmul(c2).scale_rows(&env.alpha).scale_cols(&env.gamma);
        out.add_assign(&contrib);
    }
    out
}

fn objective_binarized(target: &DenseMatrix, state: &AdmmState) -> f64 {
    let d = delta_dense(&state.m1.to_dense(), &state.m2.to_dense(), &state.envelopes);
    let r = target.sub(&d).frob_norm();
    0.5 * r * r
}

/// Warm start from the rank-R thin SVD: carriers are the singular-vector
/// signs, β carries the singular values (split into ℓ contiguous descending
/// blocks, zero-extended), α and γ come from one closed-form fit pass,
/// M = U, Y = 0, ρ = ‖T‖²_F/(NR+RM).
pub fn svd_warm_start(target: &DenseMatrix, carrier_rank: usize, envelope_rank: usize) -> Result<AdmmState, PtqError> {
    let (n, m) = target.shape();
    if carrier_rank < 1 || carrier_rank > n.min(m) {
        return Err(PtqError::InvalidConfig(format!(
            "carrier rank {carrier_rank} outside 1..=min({n},{m})"
        )));
    }
    if envelope_rank < 1 {
        return Err(PtqError::InvalidConfig("envelope rank must be >= 1".into()));
    }
    let r = carrier_rank;
    let l = envelope_rank;
    let svd = thin_svd(target, r)?;
    let u1 = SignMatrix::from_dense(&svd.u).to_dense();
    let u2 = SignMatrix::from_dense(&svd.vt).to_dense();

    // Contiguous descending singular-value blocks; earlier blocks take the
    // remainder when ℓ does not divide R.
    let base = r / l;
    let rem = r % l;
    let mut envelopes = Vec::with_capacity(l);
    let mut start = 0usize;
    for e in 0..l {
        let len = base + usize::from(e < rem);
        let mut beta = vec![0.0; r];
        beta[start..start + len].copy_from_slice(&svd.s[start..start + len]);
        envelopes.push(ScaleEnvelope { alpha: vec![1.0; n], beta, gamma: vec![1.0; m] });
        start += len;
    }
    for e in 0..l {
        let t_e = envelope_target(target, &u1, &u2, &envelopes, e);
        fit_alpha(&t_e, &u1, &u2, &mut envelopes[e]);
        fit_gamma(&t_e, &u1, &u2, &mut envelopes[e]);
    }

    let frob = target.frob_norm();
    let mut state = AdmmState {
        m1: SignMatrix::from_dense(&u1),
        m2: SignMatrix::from_dense(&u2),
        y1: DenseMatrix::zeros(n, r),
        y2: DenseMatrix::zeros(r, m),
        u1,
        u2,
        envelopes,
        rho: frob * frob / ((n * r + r * m) as f64),
        sweep: 0,
        objective_history: Vec::new(),
        dual_identity_history: Vec::new(),
        freeze_sweep: None,
        last_m_change: 0,
        flips_last_sweep: (0, 0),
    };
    state.objective_history.push(objective_binarized(target, &state));
    Ok(state)
}

/// Residual target for envelope `e`: the target minus every other envelope's
/// contribution.
fn envelope_target(
    target: &DenseMatrix,
    c1: &DenseMatrix,
    c2: &DenseMatrix,
    envelopes: &[ScaleEnvelope],
    e: usize,
) -> DenseMatrix {
    let mut t = target.clone();
    for (i, env) in envelopes.iter().enumerate() {
        if i == e {
            continue;
        }
        let contrib = c1.scale_cols(&env.beta).matmul(c2).scale_rows(&env.alpha).scale_cols(&env.gamma);
        t = t.sub(&contrib);
    }
    t
}

/// Closed-form α fit: per row, the scalar least-squares coefficient of the
/// row design (C₁·D_β·C₂·D_γ)ᵢ,:; zero rows get α_i = 0.
pub fn fit_alpha(target: &DenseMatrix, c1: &DenseMatrix, c2: &DenseMatrix, env: &mut ScaleEnvelope) {
    let design = c1.scale_cols(&env.beta).matmul(c2).scale_cols(&env.gamma);
    for i in 0..design.rows() {
        let d = design.row(i);
        let t = target.row(i);
        let denom: f64 = d.iter().map(|v| v * v).sum();
        env.alpha[i] = if denom > 0.0 { d.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / denom } else { 0.0 };
    }
}

/// Closed-form γ fit: column-wise analog of `fit_alpha` with the α side folded
/// into the design.
pub fn fit_gamma(target: &DenseMatrix, c1: &DenseMatrix, c2: &DenseMatrix, env: &mut ScaleEnvelope) {
    let design = c1.scale_cols(&env.beta).matmul(c2).scale_rows(&env.alpha);
    for j in 0..design.cols() {
        let mut denom = 0.0;
        let mut num = 0.0;
        for i in 0..design.rows() {
            let d = design.get(i, j);
            denom += d * d;
            num += d * target.get(i, j);
        }
        env.gamma[j] = if denom > 0.0 { num / denom } else { 0.0 };
    }
}

/// Closed-form β fit: with P = D_α·C₁ and Q = C₂·D_γ, solve the Gram system
/// (PᵀP ⊙ QQᵀ)·β = h, h_k = ⟨T, P_{:,k}Q_{k,:}⟩, by pseudoinverse (the Gram
/// matrix is PSD as a Schur product of PSD matrices).
pub fn fit_beta(target: &DenseMatrix, c1: &DenseMatrix, c2: &DenseMatrix, env: &mut ScaleEnvelope) {
    let p = c1.scale_rows(&env.alpha);
    let q = c2.scale_cols(&env.gamma);
    let ptp = p.transpose().matmul(&p);
    let qqt = q.matmul(&q.transpose());
    let r = ptp.rows();
    let gram = DenseMatrix::from_fn(r, r, |i, j| ptp.get(i, j) * qqt.get(i, j));
    let pt_t = p.transpose().matmul(target);
    let mut h = vec![0.0f64; r];
    for k in 0..r {
        let mut s = 0.0;
        for j in 0..q.cols() {
            s += pt_t.get(k, j) * q.get(k, j);
        }
        h[k] = s;
    }
    // Gram is PSD by construction; pinv_solve only errors on shape.
    env.beta = pinv_solve(&gram, &h).expect("square PSD gram");
}

/// Iterated scale passes against fixed carriers until the fit stops
/// improving. Used at export: the sweep loop fits scales against the latent
/// U, which tracks M only up to the consensus gap.
pub fn refit_scales(target: &DenseMatrix, c1: &DenseMatrix, c2: &DenseMatrix, envelopes: &mut [ScaleEnvelope]) {
    let mut prev = f64::INFINITY;
    for _ in 0..2000 {
        scale_sweep_dense(target, c1, c2, envelopes);
        let r = target.sub(&delta_dense(c1, c2, envelopes)).frob_norm();
        let obj = 0.5 * r * r;
        if obj == 0.0 || prev - obj <= 1e-13 * obj {
            break;
        }
        prev = obj;
    }
}

/// One ordered α → β → γ pass per envelope, cycling envelopes against their
/// residual targets. Each axis solve is an exact partial minimizer, so the
/// fit objective never increases.
pub fn scale_sweep_dense(
    target: &DenseMatrix,
    c1: &DenseMatrix,
    c2: &DenseMatrix,
    envelopes: &mut [ScaleEnvelope],
) {
    for e in 0..envelopes.len() {
        let t_e = envelope_target(target, c1, c2, envelopes, e);
        fit_alpha(&t_e, c1, c2, &mut envelopes[e]);
        fit_beta(&t_e, c1, c2, &mut envelopes[e]);
        fit_gamma(&t_e, c1, c2, &mut envelopes[e]);
    }
}

/// Scale pass of one ADMM sweep, fit against the latent carriers U.
pub fn scale_sweep(state: &mut AdmmState, target: &DenseMatrix) {
    let (u1, u2) = (state.u1.clone(), state.u2.clone());
    scale_sweep_dense(target, &u1, &u2, &mut state.envelopes);
}

/// Exact Tikhonov least-squares update of one carrier block. Rows of U₁
/// (resp. columns of U₂) decouple into R×R SPD systems; the cross-envelope
/// Gram matrices are shared across rows.
pub fn u_step(state: &mut AdmmState, target: &DenseMatrix, block: CarrierBlock) -> Result<(), PtqError> {
    let l = state.envelopes.len();
    let r = state.carrier_rank();
    match block {
        CarrierBlock::First => {
            let rho_t = state.rho / state.n1();
            // C⁽ᵉ⁾ = D_β·U₂·D_γ and the pair Grams C⁽ᵉ⁾C⁽ᵉ'⁾ᵀ.
            let cs: Vec<DenseMatrix> =
                state.envelopes.iter().map(|env| state.u2.scale_rows(&env.beta).scale_cols(&env.gamma)).collect();
            let mut grams = vec![Vec::with_capacity(l); l];
            for e in 0..l {
                for e2 in 0..l {
                    grams[e].push(if e2 >= e { Some(cs[e].matmul(&cs[e2].transpose())) } else { None });
                }
            }
            let tc: Vec<DenseMatrix> = cs.iter().map(|c| target.matmul(&c.transpose())).collect();
            let z = state.m1.to_dense().sub(&state.y1);
            let alphas: Vec<&[f64]> = state.envelopes.iter().map(|env| env.alpha.as_slice()).collect();

            let rows: Vec<Result<Vec<f64>, PtqError>> = (0..state.n())
                .into_par_iter()
                .map(|i| {
                    if alphas.iter().all(|a| a[i] == 0.0) {
                        // No data term: the Tikhonov solution is the proximal
                        // center itself, bit-exactly.
                        return Ok(z.row(i).to_vec());
                    }
                    let mut h = DenseMatrix::identity(r).scaled(rho_t);
                    for e in 0..l {
                        let ae = alphas[e][i];
                        if ae == 0.0 {
                            continue;
                        }
                        for e2 in e..l {
                            let ae2 = alphas[e2][i];
                            if ae2 == 0.0 {
                                continue;
                            }
                            let g = grams[e][e2].as_ref().unwrap();
                            let w = ae * ae2;
                            if e == e2 {
                                for a in 0..r {
                                    for b in 0..r {
                                        h.set(a, b, h.get(a, b) + w * g.get(a, b));
                                    }
                                }
                            } else {
                                for a in 0..r {
                                    for b in 0..r {
                                        h.set(a, b, h.get(a, b) + w * (g.get(a, b) + g.get(b, a)));
                                    }
                                }
                            }
                        }
                    }
                    let mut rhs: Vec<f64> = z.row(i).iter().map(|v| rho_t * v).collect();
                    for e in 0..l {
                        let ae = alphas[e][i];
                        if ae == 0.0 {
                            continue;
                        }
                        for (k, rv) in rhs.iter_mut().enumerate() {
                            *rv += ae * tc[e].get(i, k);
                        }
                    }
                    solve_spd(&h, &rhs).map_err(PtqError::from)
                })
                .collect();
            for (i, row) in rows.into_iter().enumerate() {
                let row = row?;
                state.u1.row_mut(i).copy_from_slice(&row);
            }
        }
        CarrierBlock::Second => {
            let rho_t = state.rho / state.n2();
            // E⁽ᵉ⁾ = D_α·U₁·D_β and the pair Grams E⁽ᵉ⁾ᵀE⁽ᵉ'⁾.
            let es: Vec<DenseMatrix> =
                state.envelopes.iter().map(|env| state.u1.scale_rows(&env.alpha).scale_cols(&env.beta)).collect();
            let mut grams = vec![Vec::with_capacity(l); l];
            for e in 0..l {
                for e2 in 0..l {
                    grams[e].push(if e2 >= e { Some(es[e].transpose().matmul(&es[e2])) } else { None });
                }
            }
            let et: Vec<DenseMatrix> = es.iter().map(|e| e.transpose().matmul(target)).collect();
            let z = state.m2.to_dense().sub(&state.y2);
            let gammas: Vec<&[f64]> = state.envelopes.iter().map(|env| env.gamma.as_slice()).collect();

            let cols: Vec<Result<Vec<f64>, PtqError>> = (0..state.m())
                .into_par_iter()
                .map(|j| {
                    if gammas.iter().all(|g| g[j] == 0.0) {
                        return Ok((0..r).map(|k| z.get(k, j)).collect());
                    }
                    let mut h = DenseMatrix::identity(r).scaled(rho_t);
                    for e in 0..l {
                        let ge = gammas[e][j];
                        if ge == 0.0 {
                            continue;
                        }
                        for e2 in e..l {
                            let ge2 = gammas[e2][j];
                            if ge2 == 0.0 {
                                continue;
                            }
                            let g = grams[e][e2].as_ref().unwrap();
                            let w = ge * ge2;
                            if e == e2 {
                                for a in 0..r {
                                    for b in 0..r {
                                        h.set(a, b, h.get(a, b) + w * g.get(a, b));
                                    }
                                }
                            } else {
                                for a in 0..r {
                                    for b in 0..r {
                                        h.set(a, b, h.get(a, b) + w * (g.get(a, b) + g.get(b, a)));
                                    }
                                }
                            }
                        }
                    }
                    let mut rhs: Vec<f64> = (0..r).map(|k| rho_t * z.get(k, j)).collect();
                    for e in 0..l {
                        let ge = gammas[e][j];
                        if ge == 0.0 {
                            continue;
                        }
                        for (k, rv) in rhs.iter_mut().enumerate() {
                            *rv += ge * et[e].get(k, j);
                        }
                    }
                    solve_spd(&h, &rhs).map_err(PtqError::from)
                })
                .collect();
            for (j, col) in cols.into_iter().enumerate() {
                let col = col?;
                for k in 0..r {
                    state.u2.set(k, j, col[k]);
                }
            }
        }
    }
    Ok(())
}

/// ∇_{U₁} of the data term at the current state (scales as currently held).
pub fn grad_u1(state: &AdmmState, target: &DenseMatrix) -> DenseMatrix {
    let res = target.sub(&delta_dense(&state.u1, &state.u2, &state.envelopes));
    let mut g = DenseMatrix::zeros(state.n(), state.carrier_rank());
    for env in &state.envelopes {
        let c = state.u2.scale_rows(&env.beta).scale_cols(&env.gamma);
        let term = res.matmul(&c.transpose()).scale_rows(&env.alpha);
        g = g.sub(&term);
    }
    g
}

/// ∇_{U₂} of the data term at the current state.
pub fn grad_u2(state: &AdmmState, target: &DenseMatrix) -> DenseMatrix {
    let res = target.sub(&delta_dense(&state.u1, &state.u2, &state.envelopes));
    let mut g = DenseMatrix::zeros(state.carrier_rank(), state.m());
    for env in &state.envelopes {
        let e = state.u1.scale_rows(&env.alpha).scale_cols(&env.beta);
        let term = e.transpose().matmul(&res).scale_cols(&env.gamma);
        g = g.sub(&term);
    }
    g
}

/// Sign projection M_k ← sign(U_k + Y_k) (sign(0) = +1) and scaled dual update
/// Y_k ← Y_k + U_k − M_k. Flip counts are recorded for the penalty step.
pub fn projection_dual_step(state: &mut AdmmState) {
    let z1 = state.u1.add(&state.y1);
    let m1_new = SignMatrix::from_dense(&z1);
    let flips1 = m1_new.count_diff(&state.m1);
    state.y1 = z1.sub(&m1_new.to_dense());
    state.m1 = m1_new;

    let z2 = state.u2.add(&state.y2);
    let m2_new = SignMatrix::from_dense(&z2);
    let flips2 = m2_new.count_diff(&state.m2);
    state.y2 = z2.sub(&m2_new.to_dense());
    state.m2 = m2_new;

    state.flips_last_sweep = (flips1, flips2);
}

/// Boyd residual balancing, active only while sweep < K/2. The scaled duals
/// are rescaled inversely whenever ρ changes.
pub fn penalty_update(state: &mut AdmmState, config: &AdmmConfig) {
    if state.sweep >= config.rho_schedule_cutoff() {
        return;
    }
    let d1 = state.u1.sub(&state.m1.to_dense()).frob_norm();
    let d2 = state.u2.sub(&state.m2.to_dense()).frob_norm();
    let r = (d1 * d1 + d2 * d2).sqrt();
    // Consensus already holds to better than 1e-6 per entry: the system is
    // converged for balancing purposes. Growing ρ further pushes the carrier
    // correction below one ulp of the proximal center, which only destroys
    // the precision of the dual variables.
    if r < 1e-6 * ((state.n1() + state.n2()) as f64).sqrt() {
        return;
    }
    // A flipped sign changes the entry by 2, so ‖ΔM‖_F = 2√flips.
    let (f1, f2) = state.flips_last_sweep;
    let s = state.rho * 2.0 * ((f1 as f64).sqrt() + (f2 as f64).sqrt()) / (state.n1() + state.n2());
    if r > config.mu * s {
        state.rho *= config.tau;
        state.y1 = state.y1.scaled(1.0 / config.tau);
        state.y2 = state.y2.scaled(1.0 / config.tau);
    } else if s > config.mu * r {
        state.rho /= config.tau;
        state.y1 = state.y1.scaled(config.tau);
        state.y2 = state.y2.scaled(config.tau);
    }
}

/// Smallest |U_k + Y_k| entry over both blocks — the margin the sign
/// projection has against flipping.
pub fn sign_margin(state: &AdmmState) -> f64 {
    let mut eta = f64::INFINITY;
    for (u, y) in [(&state.u1, &state.y1), (&state.u2, &state.y2)] {
        for (a, b) in u.data().iter().zip(y.data()) {
            eta = eta.min((a + b).abs());
        }
    }
    eta
}

fn identity_residual(
    rho: f64,
    n_k: f64,
    y_new: &DenseMatrix,
    grad: &DenseMatrix,
    m_new: &SignMatrix,
    m_prev: &SignMatrix,
) -> f64 {
    let dm = m_new.to_dense().sub(&m_prev.to_dense());
    let lhs = y_new.scaled(rho).add(&grad.scaled(n_k)).add(&dm.scaled(rho));
    let denom = rho * y_new.frob_norm() + n_k * grad.frob_norm() + rho * dm.frob_norm();
    lhs.frob_norm() / denom.max(1e-30)
}

/// Full compression run: warm start, K sweeps of (u-steps, scale pass,
/// projection/dual, penalty), early exit on carrier freeze in the tail.
/// Exports the adapter built from the binarized carriers and final scales.
pub fn run_admm(target: &DenseMatrix, config: &AdmmConfig) -> Result<(LordbaAdapter, AdmmState), PtqError> {
    let (n, m) = target.shape();
    config.validate(n, m)?;
    if !target.is_finite() {
        return Err(PtqError::NonFinite { sweep: 0, what: "target".into() });
    }
    if target.frob_norm() == 0.0 {
        return Err(PtqError::ZeroTarget);
    }

    let mut state = svd_warm_start(target, config.carrier_rank, config.envelope_rank)?;
    let cutoff = config.rho_schedule_cutoff();
    for t in 1..=config.max_sweeps {
        state.sweep = t;
        u_step(&mut state, target, CarrierBlock::First)?;
        let g1 = grad_u1(&state, target);
        u_step(&mut state, target, CarrierBlock::Second)?;
        let g2 = grad_u2(&state, target);
        scale_sweep(&mut state, target);
        let m1_prev = state.m1.clone();
        let m2_prev = state.m2.clone();
        projection_dual_step(&mut state);

        let id1 = identity_residual(state.rho, state.n1(), &state.y1, &g1, &state.m1, &m1_prev);
        let id2 = identity_residual(state.rho, state.n2(), &state.y2, &g2, &state.m2, &m2_prev);
        state.dual_identity_history.push(id1.max(id2));
        state.objective_history.push(objective_binarized(target, &state));

        if !state.is_finite() {
            return Err(PtqError::NonFinite { sweep: t, what: "carriers/duals/scales".into() });
        }
        penalty_update(&mut state, config);

        let flips = state.flips_last_sweep.0 + state.flips_last_sweep.1;
        if flips > 0 {
            state.last_m_change = t;
        }
        if config.freeze_detect && t >= cutoff && flips == 0 {
            state.freeze_sweep = Some(state.last_m_change);
            break;
        }
    }
    if state.freeze_sweep.is_none()
        && state.sweep >= cutoff
        && state.last_m_change < state.sweep
        && state.flips_last_sweep == (0, 0)
    {
        state.freeze_sweep = Some(state.last_m_change);
    }

    // The sweep loop fits scales against the latent carriers; the export uses
    // the binarized ones, so give the scales a final exact fit against those.
    let m1d = state.m1.to_dense();
    let m2d = state.m2.to_dense();
    refit_scales(target, &m1d, &m2d, &mut state.envelopes);

    let r0 = config.r0_ref.unwrap_or(config.carrier_rank);
    let adapter = LordbaAdapter::new(state.m1.clone(), state.m2.clone(), state.envelopes.clone(), r0)?;
    Ok((adapter, state))
}
