//! Multiplication-free adapter branch: packed ±1 carriers, sign-accumulation
//! matmuls via the 2P−S identity, and a storage/throughput microbenchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::adapter::{LordbaAdapter, ScaleEnvelope, SignMatrix};
use crate::format::lba1_file_bytes;
use crate::tensor::DenseMatrix;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Adapter with carriers laid out for the forward pass: B₁ stored by columns
/// (the reduction axis of the first matmul), B₂ by rows (scanned linearly
/// while scattering into the output). Both are word-contiguous along their
/// scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedAdapter {
    /// B₁ᵀ: word row k holds column k of B₁.
    pub b1_cols: SignMatrix,
    pub b2: SignMatrix,
    pub envelopes: Vec<ScaleEnvelope>,
    pub r0_ref: usize,
    /// Popcount of each B₁ column / B₂ row; a cheap density table kept next
    /// to the bits (reports, sanity checks).
    pub b1_col_pos: Vec<u32>,
    pub b2_row_pos: Vec<u32>,
}

impl PackedAdapter {
    pub fn from_adapter(adapter: &LordbaAdapter) -> Self {
        let b1_cols = adapter.b1.transpose();
        let b2 = adapter.b2.clone();
        let count = |s: &SignMatrix, i: usize| s.word_row(i).iter().map(|w| w.count_ones()).sum();
        let b1_col_pos = (0..b1_cols.rows()).map(|k| count(&b1_cols, k)).collect();
        let b2_row_pos = (0..b2.rows()).map(|k| count(&b2, k)).collect();
        PackedAdapter {
            b1_cols,
            b2,
            envelopes: adapter.envelopes.clone(),
            r0_ref: adapter.r0_ref,
            b1_col_pos,
            b2_row_pos,
        }
    }

    /// Exact inverse of `from_adapter`.
    pub fn unpack(&self) -> LordbaAdapter {
        LordbaAdapter::new(
            self.b1_cols.transpose(),
            self.b2.clone(),
            self.envelopes.clone(),
            self.r0_ref,
        )
        .expect("packed fields preserve adapter invariants")
    }

    pub fn n(&self) -> usize {
        self.b1_cols.cols()
    }

    pub fn m(&self) -> usize {
        self.b2.cols()
    }

    pub fn carrier_rank(&self) -> usize {
        self.b1_cols.rows()
    }

    pub fn num_envelopes(&self) -> usize {
        self.envelopes.len()
    }
}

/// Sum of x over the set bits of the mask words. Padding bits are guaranteed
/// zero by SignMatrix, so the scan never indexes past x.
fn masked_sum(x: &[f64], words: &[u64]) -> f64 {
    let mut acc = 0.0;
    for (wi, &word) in words.iter().enumerate() {
        let mut w = word;
        let base = wi * 64;
        while w != 0 {
            acc += x[base + w.trailing_zeros() as usize];
            w &= w - 1;
        }
    }
    acc
}

/// One output row of X·B given B's columns as word rows: z_j = 2P_j − S.
fn sign_row_cols(x: &[f64], b_cols: &SignMatrix, out: &mut [f64]) {
    let s: f64 = x.iter().sum();
    for (j, o) in out.iter_mut().enumerate() {
        *o = 2.0 * masked_sum(x, b_cols.word_row(j)) - s;
    }
}

/// One output row of V·B with B row-major: scatter +v_k over row k's set
/// bits, then z_j = 2·acc_j − S.
fn sign_row_rows(v: &[f64], b_rows: &SignMatrix, out: &mut [f64]) {
    out.fill(0.0);
    for (k, &val) in v.iter().enumerate() {
        for (wi, &word) in b_rows.word_row(k).iter().enumerate() {
            let mut w = word;
            let base = wi * 64;
            while w != 0 {
                out[base + w.trailing_zeros() as usize] += val;
                w &= w - 1;
            }
        }
    }
    let s: f64 = v.iter().sum();
    for o in out.iter_mut() {
        *o = 2.0 * *o - s;
    }
}

fn sign_matmul_cols(x: &DenseMatrix, b_cols: &SignMatrix) -> DenseMatrix {
    let (t, q) = (x.rows(), b_cols.rows());
    let mut out = DenseMatrix::zeros(t, q);
    let rows: Vec<&[f64]> = (0..t).map(|i| x.row(i)).collect();
    out.data_mut()
        .par_chunks_mut(q)
        .zip(rows.into_par_iter())
        .for_each(|(orow, xrow)| sign_row_cols(xrow, b_cols, orow));
    out
}

/// X·B over a ±1 matrix, multiplication-free on the carrier edge. 64-bit
/// accumulation; each output element reduces in fixed word order, so results
/// do not depend on the worker count.
pub fn sign_matmul(x: &DenseMatrix, b: &SignMatrix) -> Result<DenseMatrix, KernelError> {
    if x.cols() != b.rows() {
        return Err(KernelError::ShapeMismatch(format!(
            "X is {}x{}, B is {}x{}",
            x.rows(),
            x.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(sign_matmul_cols(x, &b.transpose()))
}

/// Unmerged adapter branch X·ΔW = (((X·D_α)·B₁)·D_β)·B₂·D_γ summed over
/// envelopes. All envelopes ride one pass through the shared packed carriers:
/// their per-envelope intermediates are stacked into an (ℓT)-row batch.
pub fn adapter_forward(x: &DenseMatrix, packed: &PackedAdapter) -> Result<DenseMatrix, KernelError> {
    if x.cols() != packed.n() {
        return Err(KernelError::ShapeMismatch(format!(
            "X is {}x{}, adapter wants N={}",
            x.rows(),
            x.cols(),
            packed.n()
        )));
    }
    let (t, n) = (x.rows(), x.cols());
    let (r, m, l) = (packed.carrier_rank(), packed.m(), packed.num_envelopes());

    // Stacked X·D_α: block e holds x scaled by envelope e's alpha.
    let mut stacked = DenseMatrix::zeros(l * t, n);
    for (e, env) in packed.envelopes.iter().enumerate() {
        for i in 0..t {
            let src = x.row(i);
            let dst = stacked.row_mut(e * t + i);
            for j in 0..n {
                dst[j] = src[j] * env.alpha[j];
            }
        }
    }

    let mut mid = sign_matmul_cols(&stacked, &packed.b1_cols);
    for (e, env) in packed.envelopes.iter().enumerate() {
        for i in 0..t {
            let row = mid.row_mut(e * t + i);
            for k in 0..r {
                row[k] *= env.beta[k];
            }
        }
    }

    let mut z = DenseMatrix::zeros(l * t, m);
    {
        let rows: Vec<&[f64]> = (0..l * t).map(|i| mid.row(i)).collect();
        z.data_mut()
            .par_chunks_mut(m)
            .zip(rows.into_par_iter())
            .for_each(|(orow, vrow)| sign_row_rows(vrow, &packed.b2, orow));
    }

    let mut out = DenseMatrix::zeros(t, m);
    for (e, env) in packed.envelopes.iter().enumerate() {
        for i in 0..t {
            let src = z.row(e * t + i);
            let dst = out.row_mut(i);
            for j in 0..m {
                dst[j] += src[j] * env.gamma[j];
            }
        }
    }
    Ok(out)
}

/// Streaming-cost ratio of an fp16 rank-r₀ factor pair over the packed
/// adapter: 16·r₀(N+M) / (r₀(N+M) + 16ℓ(N+r₀+M)).
pub fn bandwidth_ratio(n: usize, m: usize, r0: usize, l: usize) -> f64 {
    let nm = (n + m) as f64;
    let r0f = r0 as f64;
    16.0 * r0f * nm / (r0f * nm + 16.0 * l as f64 * (n as f64 + r0f + m as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub t: usize,
    pub n: usize,
    pub r: usize,
    pub m: usize,
    pub l: usize,
}

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub shape: BenchShape,
    /// Serialized adapter container size (word padding and header included).
    pub bytes_adapter: u64,
    /// fp16 rank-R factor pair at the same shape.
    pub bytes_fp16_equiv: u64,
    /// bytes_fp16_equiv / bytes_adapter.
    pub ratio: f64,
    pub t_packed_ns: u128,
    pub t_dense_ns: u128,
    /// Packed forward vs dense reconstruct-then-matmul oracle.
    pub max_abs_dev: f64,
}

fn random_adapter(shape: BenchShape, rng: &mut ChaCha12Rng) -> LordbaAdapter {
    let BenchShape { n, r, m, l, .. } = shape;
    let b1 = SignMatrix::from_fn(n, r, |_, _| rng.random());
    let b2 = SignMatrix::from_fn(r, m, |_, _| rng.random());
    let mut envelopes = Vec::with_capacity(l);
    for _ in 0..l {
        let mut env = ScaleEnvelope::ones(n, r, m);
        for v in env.alpha.iter_mut().chain(&mut env.beta).chain(&mut env.gamma) {
            *v = rng.random_range(0.5..1.5);
        }
        envelopes.push(env);
    }
    LordbaAdapter::new(b1, b2, envelopes, r).unwrap()
}

/// Time the packed branch against a dense unmerged rank-R branch on random
/// well-scaled data. Wall times are medians over `trials` (≥ 3) runs;
/// correctness and storage fields are deterministic for a given shape.
pub fn bench(shapes: &[BenchShape], trials: usize) -> Vec<KernelReport> {
    assert!(trials >= 3, "need at least 3 trials for a median");
    shapes
        .iter()
        .map(|&shape| {
            let mut rng = ChaCha12Rng::seed_from_u64(
                (shape.t ^ shape.n.rotate_left(8) ^ shape.m.rotate_left(16) ^ shape.r) as u64,
            );
            let adapter = random_adapter(shape, &mut rng);
            let packed = PackedAdapter::from_adapter(&adapter);
            let x = DenseMatrix::from_fn(shape.t, shape.n, |_, _| rng.random_range(-1.0..1.0));

            // Dense comparator: unmerged rank-R fp-factor branch (X·A)·B.
            let a = DenseMatrix::from_fn(shape.n, shape.r, |_, _| rng.random_range(-1.0..1.0));
            let b = DenseMatrix::from_fn(shape.r, shape.m, |_, _| rng.random_range(-1.0..1.0));

            let mut packed_times = Vec::with_capacity(trials);
            let mut dense_times = Vec::with_capacity(trials);
            let mut max_abs_dev: f64 = 0.0;
            let oracle = x.matmul(&adapter.reconstruct());
            for _ in 0..trials {
                let t0 = Instant::now();
                let got = adapter_forward(&x, &packed).expect("shapes agree");
                packed_times.push(t0.elapsed().as_nanos());
                max_abs_dev = max_abs_dev.max(got.sub(&oracle).max_abs());

                let t1 = Instant::now();
                let _ = x.matmul(&a).matmul(&b);
                dense_times.push(t1.elapsed().as_nanos());
            }
            packed_times.sort_unstable();
            dense_times.sort_unstable();
            let bytes_adapter = lba1_file_bytes(shape.n, shape.m, shape.r, shape.l);
            let bytes_fp16_equiv = 2 * shape.r as u64 * (shape.n + shape.m) as u64;
            KernelReport {
                shape,
                bytes_adapter,
                bytes_fp16_equiv,
                ratio: bytes_fp16_equiv as f64 / bytes_adapter as f64,
                t_packed_ns: packed_times[trials / 2],
                t_dense_ns: dense_times[trials / 2],
                max_abs_dev,
            }
        })
        .collect()
}

pub fn report_csv(reports: &[KernelReport]) -> String {
    let mut out =
        String::from("T,N,R,M,l,bytes_adapter,bytes_fp16_equiv,ratio,t_packed_ns,t_dense_ns,max_abs_dev\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{},{},{:.3e}\n",
            r.shape.t,
            r.shape.n,
            r.shape.r,
            r.shape.m,
            r.shape.l,
            r.bytes_adapter,
            r.bytes_fp16_equiv,
            r.ratio,
            r.t_packed_ns,
            r.t_dense_ns,
            r.max_abs_dev
        ));
    }
    out
}
