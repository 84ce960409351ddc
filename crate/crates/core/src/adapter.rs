//! Adapter data model: bit-packed sign carriers, scale envelopes, LoRA factor
//! pairs, storage accounting, gauge fixing, and the sign-noise diagnostics.

use crate::tensor::DenseMatrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate factors: {0}")]
    DegenerateFactors(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
}

/// Packed ±1 matrix. Bit 1 encodes +1, bit 0 encodes −1; rows are padded to
/// 64-bit word boundaries and padding bits are always 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

#[inline]
fn words_for(cols: usize) -> usize {
    cols.div_ceil(64)
}

impl SignMatrix {
    /// `f(i, j)` returning true means +1.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let wpr = words_for(cols);
        let mut words = vec![0u64; rows * wpr];
        for i in 0..rows {
            for j in 0..cols {
                if f(i, j) {
                    words[i * wpr + j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        SignMatrix { rows, cols, words_per_row: wpr, words }
    }

    /// Pack the sign pattern of a dense matrix; sign(0) = +1 (and −0.0 ≥ 0.0
    /// in IEEE, so signed zeros also map to +1).
    pub fn from_dense(m: &DenseMatrix) -> Self {
        Self::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) >= 0.0)
    }

    /// Rebuild from a raw word buffer (e.g. deserialization). Rejects buffers
    /// of the wrong length or with nonzero padding bits.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self, AdapterError> {
        let wpr = words_for(cols);
        if words.len() != rows * wpr {
            return Err(AdapterError::ShapeMismatch(format!(
                "sign buffer holds {} words, expected {} for {}x{}",
                words.len(),
                rows * wpr,
                rows,
                cols
            )));
        }
        if cols % 64 != 0 && wpr > 0 {
            let mask = !0u64 << (cols % 64);
            for i in 0..rows {
                if words[i * wpr + wpr - 1] & mask != 0 {
                    return Err(AdapterError::ShapeMismatch(format!("nonzero padding bits in packed row {i}")));
                }
            }
        }
        Ok(SignMatrix { rows, cols, words_per_row: wpr, words })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_pos(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.rows && j < self.cols);
        self.words[i * self.words_per_row + j / 64] >> (j % 64) & 1 == 1
    }

    /// Entry as ±1.0.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.is_pos(i, j) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn word_row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn transpose(&self) -> SignMatrix {
        SignMatrix::from_fn(self.cols, self.rows, |i, j| self.is_pos(j, i))
    }

    /// Number of entries where the two matrices disagree.
    pub fn count_diff(&self, other: &SignMatrix) -> usize {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "count_diff shape mismatch");
        self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones() as usize).sum()
    }
}

/// One (α, β, γ) scale triple of an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEnvelope {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ScaleEnvelope {
    pub fn ones(n: usize, r: usize, m: usize) -> Self {
        ScaleEnvelope { alpha: vec![1.0; n], beta: vec![1.0; r], gamma: vec![1.0; m] }
    }

    pub fn zeros(n: usize, r: usize, m: usize) -> Self {
        ScaleEnvelope { alpha: vec![0.0; n], beta: vec![0.0; r], gamma: vec![0.0; m] }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).chain(&self.gamma).all(|v| v.is_finite())
    }
}

/// Double-binary adapter: ΔW = Σᵢ diag(α⁽ⁱ⁾)·B₁·diag(β⁽ⁱ⁾)·B₂·diag(γ⁽ⁱ⁾).
#[derive(Debug, Clone, PartialEq)]
pub struct LordbaAdapter {
    pub b1: SignMatrix,
    pub b2: SignMatrix,
    pub envelopes: Vec<ScaleEnvelope>,
    /// Reference dense-LoRA rank used as the bits-per-weight denominator.
    pub r0_ref: usize,
}

impl LordbaAdapter {
    pub fn new(
        b1: SignMatrix,
        b2: SignMatrix,
        envelopes: Vec<ScaleEnvelope>,
        r0_ref: usize,
    ) -> Result<Self, AdapterError> {
        if b1.cols() != b2.rows() {
            return Err(AdapterError::ShapeMismatch(format!(
                "carrier ranks disagree: B1 is {}x{}, B2 is {}x{}",
                b1.rows(),
                b1.cols(),
                b2.rows(),
                b2.cols()
            )));
        }
        if envelopes.is_empty() {
            return Err(AdapterError::ShapeMismatch("adapter needs at least one scale envelope".into()));
        }
        if r0_ref == 0 {
            return Err(AdapterError::ShapeMismatch("r0_ref must be >= 1".into()));
        }
        let (n, r, m) = (b1.rows(), b1.cols(), b2.cols());
        for (i, env) in envelopes.iter().enumerate() {
            if env.alpha.len() != n || env.beta.len() != r || env.gamma.len() != m {
                return Err(AdapterError::ShapeMismatch(format!(
                    "envelope {i} has lengths ({},{},{}), adapter is N={n}, R={r}, M={m}",
                    env.alpha.len(),
                    env.beta.len(),
                    env.gamma.len()
                )));
            }
            if !env.is_finite() {
                return Err(AdapterError::NonFinite(format!("envelope {i} contains NaN/Inf")));
            }
        }
        Ok(LordbaAdapter { b1, b2, envelopes, r0_ref })
    }

    pub fn n(&self) -> usize {
        self.b1.rows()
    }

    pub fn m(&self) -> usize {
        self.b2.cols()
    }

    pub fn carrier_rank(&self) -> usize {
        self.b1.cols()
    }

    pub fn num_envelopes(&self) -> usize {
        self.envelopes.len()
    }

    /// Dense ΔW. Envelope contributions are accumulated in order.
    pub fn reconstruct(&self) -> DenseMatrix {
        let b1d = self.b1.to_dense();
        let b2d = self.b2.to_dense();
        let mut out = DenseMatrix::zeros(self.n(), self.m());
        for env in &self.envelopes {
            let contrib = b1d.scale_cols(&env.beta).matmul(&b2d).scale_rows(&env.alpha).scale_cols(&env.gamma);
            out.add_assign(&contrib);
        }
        out
    }

    /// Logical payload bits: R(N+M) carrier bits + 16ℓ(N+R+M) half-precision
    /// scale bits. Container headers and word padding are not included.
    pub fn storage_bits(&self) -> u64 {
        let (n, r, m) = (self.n() as u64, self.carrier_rank() as u64, self.m() as u64);
        let l = self.num_envelopes() as u64;
        r * (n + m) + 16 * l * (n + r + m)
    }

    /// (carrier-only bits per reference weight, total bits per reference weight).
    pub fn bpw(&self) -> (f64, f64) {
        let r0 = self.r0_ref as f64;
        let nm = (self.n() + self.m()) as f64;
        let bpw_bc = self.carrier_rank() as f64 / r0;
        let bpw_tot = self.storage_bits() as f64 / (r0 * nm);
        (bpw_bc, bpw_tot)
    }
}

/// Dense LoRA factor pair: ΔW = A·Bᵀ with A: N×r₀, B: M×r₀.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LoraFactors {
    pub fn new(a: DenseMatrix, b: DenseMatrix) -> Result<Self, AdapterError> {
        if a.cols() != b.cols() || a.cols() == 0 {
            return Err(AdapterError::ShapeMismatch(format!(
                "factor ranks disagree: A is {}x{}, B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(LoraFactors { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> DenseMatrix {
        self.a.matmul(&self.b.transpose())
    }
}

/// Column-balancing gauge: rescale each factor column pair so both columns
/// have equal norm. Leaves A·Bᵀ and all entry signs unchanged; column pairs
/// with a zero member contribute nothing and are left alone.
pub fn gauge_fix(factors: &LoraFactors) -> LoraFactors {
    let mut a = factors.a.clone();
    let mut b = factors.b.clone();
    for k in 0..factors.rank() {
        let na: f64 = (0..a.rows()).map(|i| a.get(i, k) * a.get(i, k)).sum::<f64>().sqrt();
        let nb: f64 = (0..b.rows()).map(|i| b.get(i, k) * b.get(i, k)).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            let d = (nb / na).sqrt();
            for i in 0..a.rows() {
                a.set(i, k, a.get(i, k) * d);
            }
            for i in 0..b.rows() {
                b.set(i, k, b.get(i, k) / d);
            }
        }
    }
    LoraFactors { a, b }
}

/// Plug-in sign-noise estimates over factor entry magnitudes.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub mu_a: f64,
    pub mu_b: f64,
    pub zeta: f64,
    pub ratio: f64,
}

fn magnitude_moments(m: &DenseMatrix) -> (f64, f64) {
    // Constant magnitude (the pure-sign case) must report exactly zero
    // dispersion, not the rounding residue of the mean.
    let lo = m.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    if lo == hi {
        return (hi, 0.0);
    }
    let n = (m.rows() * m.cols()) as f64;
    let mean = m.data().iter().map(|v| v.abs()).sum::<f64>() / n;
    // Population (1/n) variance of |entries|.
    let var = m.data().iter().map(|v| (v.abs() - mean) * (v.abs() - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Magnitude statistics in the column-balancing gauge: mean |entry| per
/// factor, the larger of the two magnitude standard deviations, and their
/// noise-to-signal ratio.
pub fn diagnose(factors: &LoraFactors) -> Result<DiagnosticsReport, AdapterError> {
    let g = gauge_fix(factors);
    let (mu_a, zeta_a) = magnitude_moments(&g.a);
    let (mu_b, zeta_b) = magnitude_moments(&g.b);
    let floor = mu_a.min(mu_b);
    if floor <= 0.0 {
        return Err(AdapterError::DegenerateFactors("all-zero factor; magnitude ratio undefined".into()));
    }
    let zeta = zeta_a.max(zeta_b);
    Ok(DiagnosticsReport { mu_a, mu_b, zeta, ratio: zeta / floor })
}

/// Rank-1-envelope adapter over given sign carriers with β = μ_A·μ_B and
/// unit α, γ.
pub fn canonical_adapter(
    b1: SignMatrix,
    b2: SignMatrix,
    mu_a: f64,
    mu_b: f64,
    r0_ref: usize,
) -> Result<LordbaAdapter, AdapterError> {
    let (n, r, m) = (b1.rows(), b1.cols(), b2.cols());
    let env = ScaleEnvelope { alpha: vec![1.0; n], beta: vec![mu_a * mu_b; r], gamma: vec![1.0; m] };
    LordbaAdapter::new(b1, b2, vec![env], r0_ref)
}

/// Observed-sign adapter of a factor pair: carriers are the entry signs of A
/// and Bᵀ, scales the canonical (1, μ_Aμ_B, 1) triple.
pub fn canonical_reconstruction(
    factors: &LoraFactors,
    mu_a: f64,
    mu_b: f64,
) -> Result<LordbaAdapter, AdapterError> {
    let b1 = SignMatrix::from_dense(&factors.a);
    let b2 = SignMatrix::from_dense(&factors.b).transpose();
    canonical_adapter(b1, b2, mu_a, mu_b, factors.rank())
}
