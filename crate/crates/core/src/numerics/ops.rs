//! Forward/backward kernels. Raw slice kernels carry the hot loops (llm.c
//! style, explicit row offsets); thin `Tensor` wrappers add the shape checks
//! of the public contracts. All backward kernels ACCUMULATE into their
//! gradient outputs so a hand-scheduled backward pass can sum branches.

use super::{fmt_shape, Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rayon::prelude::*;

/// Below this many multiply-adds the parallel dispatch costs more than it buys.
const PAR_THRESHOLD: usize = 1 << 16;

/// Multi-accumulator dot product; fixed lane order keeps results deterministic
/// while letting the auto-vectorizer use the full SIMD width.
#[inline]
pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 16;
    let n = x.len().min(y.len());
    let mut acc = [T::zero(); LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let xb = &x[c * LANES..(c + 1) * LANES];
        let yb = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + xb[l] * yb[l];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for i in chunks * LANES..n {
        s = s + x[i] * y[i];
    }
    s
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], scale: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = *o + scale * v;
    }
}

// ---------------------------------------------------------------------------
// matmul: c[m,n] = a[m,k] . b[k,n]
//
// The tiled engine computes 4 output rows x 32 output columns per step so the
// accumulators live in SIMD registers and every rhs row load is reused 4x.
// Summation order per output element is fixed (ascending contraction index),
// so results are bitwise-identical for any thread count.
// ---------------------------------------------------------------------------

const MM_JB: usize = 32;

/// out_block (RB rows x n) (+)= lhs_tile (RB x contract) . rhs (contract x n)
#[inline(always)]
fn mm_block_rb<T: Scalar, const RB: usize, const ACCUMULATE: bool>(
    out_block: &mut [T],
    lhs: &[T],
    rhs: &[T],
    contract: usize,
    n: usize,
) {
    let mut jb = 0;
    while jb + MM_JB <= n {
        let mut acc = [[T::zero(); MM_JB]; RB];
        if ACCUMULATE {
            for r in 0..RB {
                acc[r].copy_from_slice(&out_block[r * n + jb..r * n + jb + MM_JB]);
            }
        }
        for c in 0..contract {
            let rvec = &rhs[c * n + jb..c * n + jb + MM_JB];
            for r in 0..RB {
                let l = lhs[r * contract + c];
                for j in 0..MM_JB {
                    acc[r][j] = acc[r][j] + l * rvec[j];
                }
            }
        }
        for r in 0..RB {
            out_block[r * n + jb..r * n + jb + MM_JB].copy_from_slice(&acc[r]);
        }
        jb += MM_JB;
    }
    if jb < n {
        for r in 0..RB {
            let (row, lrow) = (&mut out_block[r * n..r * n + n], &lhs[r * contract..]);
            if !ACCUMULATE {
                row[jb..].fill(T::zero());
            }
            for c in 0..contract {
                axpy(&mut row[jb..], lrow[c], &rhs[c * n + jb..c * n + n]);
            }
        }
    }
}

#[inline(always)]
fn mm_block1<T: Scalar, const ACCUMULATE: bool>(
    out_row: &mut [T],
    lhs: &[T],
    rhs: &[T],
    contract: usize,
    n: usize,
) {
    let mut jb = 0;
    while jb + MM_JB <= n {
        let mut acc = [T::zero(); MM_JB];
        if ACCUMULATE {
            acc.copy_from_slice(&out_row[jb..jb + MM_JB]);
        }
        for c in 0..contract {
            let l = lhs[c];
            let rvec = &rhs[c * n + jb..c * n + jb + MM_JB];
            for j in 0..MM_JB {
                acc[j] = acc[j] + l * rvec[j];
            }
        }
        out_row[jb..jb + MM_JB].copy_from_slice(&acc);
        jb += MM_JB;
    }
    if jb < n {
        if !ACCUMULATE {
            out_row[jb..].fill(T::zero());
        }
        for c in 0..contract {
            axpy(&mut out_row[jb..], lhs[c], &rhs[c * n + jb..c * n + n]);
        }
    }
}

/// out (+)= lhs . rhs with lhs [m, contract], rhs [contract, n], row-major.
fn mm_driver<T: Scalar, const ACCUMULATE: bool>(
    out: &mut [T],
    lhs: &[T],
    rhs: &[T],
    m: usize,
    contract: usize,
    n: usize,
) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(lhs.len(), m * contract);
    debug_assert_eq!(rhs.len(), contract * n);
    const RB: usize = 8;
    let body = |(bi, out_block): (usize, &mut [T])| {
        let i0 = bi * RB;
        let rows = out_block.len() / n;
        if rows == RB {
            mm_block_rb::<T, RB, ACCUMULATE>(
                out_block,
                &lhs[i0 * contract..(i0 + RB) * contract],
                rhs,
                contract,
                n,
            );
        } else {
            for r in 0..rows {
                mm_block1::<T, ACCUMULATE>(
                    &mut out_block[r * n..(r + 1) * n],
                    &lhs[(i0 + r) * contract..(i0 + r + 1) * contract],
                    rhs,
                    contract,
                    n,
                );
            }
        }
    };
    if m * contract * n < PAR_THRESHOLD {
        out.chunks_mut(RB * n).enumerate().for_each(body);
    } else {
        out.par_chunks_mut(RB * n).enumerate().for_each(body);
    }
}

/// Blocked transpose: dst[j, rows] = src[rows, cols] element (i, j).
pub fn transpose<T: Scalar>(dst: &mut [T], src: &[T], rows: usize, cols: usize) {
    debug_assert_eq!(dst.len(), rows * cols);
    const TB: usize = 16;
    let mut i0 = 0;
    while i0 < rows {
        let ih = (i0 + TB).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let jh = (j0 + TB).min(cols);
            for i in i0..ih {
                for j in j0..jh {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
            j0 = jh;
        }
        i0 = ih;
    }
}

pub fn matmul_fwd<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    mm_driver::<T, false>(out, a, b, m, k, n);
}

/// out += a . b
pub fn matmul_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    mm_driver::<T, true>(out, a, b, m, k, n);
}

/// dA += dC . B^T ; dB += A^T . dC
pub fn matmul_bwd<T: Scalar>(
    da: &mut [T],
    db: &mut [T],
    dout: &[T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(dout.len(), m * n);
    // dA = dC . B^T: transpose b once, then reuse the tiled engine.
    let mut bt = vec![T::zero(); k * n];
    transpose(&mut bt, b, k, n);
    mm_driver::<T, true>(da, dout, &bt, m, n, k);
    // dB = A^T . dC: transpose a once.
    let mut at = vec![T::zero(); m * k];
    transpose(&mut at, a, m, k);
    mm_driver::<T, true>(db, &at, dout, k, m, n);
}

// ---------------------------------------------------------------------------
// matmul_nt: c[m,n] = a[m,k] . b^T where b is stored [n,k]
// (used for attention scores q.k^T and the weight-tied LM head)
// ---------------------------------------------------------------------------

pub fn matmul_nt_fwd<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let row = |out_row: &mut [T], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, slot) in out_row.iter_mut().enumerate() {
            *slot = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n < PAR_THRESHOLD {
        for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
            row(out_row, i);
        }
    } else {
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(out_row, i));
    }
}

/// dA += dC . B ; dB += dC^T . A   (c = a . b^T, b stored [n,k])
pub fn matmul_nt_bwd<T: Scalar>(
    da: &mut [T],
    db: &mut [T],
    dout: &[T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(dout.len(), m * n);
    let da_row = |row: &mut [T], i: usize| {
        let d_row = &dout[i * n..(i + 1) * n];
        for (j, &dv) in d_row.iter().enumerate() {
            axpy(row, dv, &b[j * k..(j + 1) * k]);
        }
    };
    let db_row = |row: &mut [T], j: usize| {
        for i in 0..m {
            axpy(row, dout[i * n + j], &a[i * k..(i + 1) * k]);
        }
    };
    if m * k * n < PAR_THRESHOLD {
        for (i, row) in da.chunks_exact_mut(k).enumerate() {
            da_row(row, i);
        }
        for (j, row) in db.chunks_exact_mut(k).enumerate() {
            db_row(row, j);
        }
    } else {
        da.par_chunks_exact_mut(k)
            .enumerate()
            .for_each(|(i, row)| da_row(row, i));
        db.par_chunks_exact_mut(k)
            .enumerate()
            .for_each(|(j, row)| db_row(row, j));
    }
}

// ---------------------------------------------------------------------------
// bias add over rows
// ---------------------------------------------------------------------------

pub fn bias_add<T: Scalar>(out: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.iter()) {
            *o = *o + b;
        }
    }
}

pub fn bias_bwd<T: Scalar>(dbias: &mut [T], dout: &[T]) {
    let n = dbias.len();
    for row in dout.chunks_exact(n) {
        for (d, &g) in dbias.iter_mut().zip(row.iter()) {
            *d = *d + g;
        }
    }
}

// ---------------------------------------------------------------------------
// layer norm over the last axis, biased variance
// ---------------------------------------------------------------------------

pub fn layer_norm_fwd<T: Scalar>(
    out: &mut [T],
    mean_out: &mut [T],
    rstd_out: &mut [T],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    cols: usize,
    eps: T,
) {
    let inv_c = T::one() / T::from_usize(cols);
    for (r, (row_out, row_x)) in out
        .chunks_exact_mut(cols)
        .zip(x.chunks_exact(cols))
        .enumerate()
    {
        let mut mean = T::zero();
        for &v in row_x {
            mean = mean + v;
        }
        mean = mean * inv_c;
        let mut var = T::zero();
        for &v in row_x {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        mean_out[r] = mean;
        rstd_out[r] = rstd;
        for j in 0..cols {
            row_out[j] = gamma[j] * ((row_x[j] - mean) * rstd) + beta[j];
        }
    }
}

pub fn layer_norm_bwd<T: Scalar>(
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dout: &[T],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    cols: usize,
) {
    let inv_c = T::one() / T::from_usize(cols);
    for (r, (row_dx, (row_x, row_dout))) in dx
        .chunks_exact_mut(cols)
        .zip(x.chunks_exact(cols).zip(dout.chunks_exact(cols)))
        .enumerate()
    {
        let (mu, rs) = (mean[r], rstd[r]);
        // two reductions shared by every element of the row
        let mut dnorm_mean = T::zero();
        let mut dnorm_norm_mean = T::zero();
        for j in 0..cols {
            let norm = (row_x[j] - mu) * rs;
            let dnorm = gamma[j] * row_dout[j];
            dnorm_mean = dnorm_mean + dnorm;
            dnorm_norm_mean = dnorm_norm_mean + dnorm * norm;
        }
        dnorm_mean = dnorm_mean * inv_c;
        dnorm_norm_mean = dnorm_norm_mean * inv_c;
        for j in 0..cols {
            let norm = (row_x[j] - mu) * rs;
            let dnorm = gamma[j] * row_dout[j];
            dgamma[j] = dgamma[j] + row_dout[j] * norm;
            dbeta[j] = dbeta[j] + row_dout[j];
            row_dx[j] = row_dx[j] + (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rs;
        }
    }
}

// ---------------------------------------------------------------------------
// causal softmax over the last two (square) axes
// ---------------------------------------------------------------------------

pub fn causal_softmax_fwd<T: Scalar>(out: &mut [T], scores: &[T], t: usize) {
    for (mat_out, mat_in) in out.chunks_exact_mut(t * t).zip(scores.chunks_exact(t * t)) {
        for i in 0..t {
            let row_in = &mat_in[i * t..(i + 1) * t];
            let row_out = &mut mat_out[i * t..(i + 1) * t];
            let mut maxv = row_in[0];
            for &v in &row_in[1..=i] {
                if v > maxv {
                    maxv = v;
                }
            }
            let mut sum = T::zero();
            for j in 0..=i {
                let e = (row_in[j] - maxv).exp();
                row_out[j] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..=i {
                row_out[j] = row_out[j] * inv;
            }
            for j in i + 1..t {
                row_out[j] = T::zero();
            }
        }
    }
}

pub fn causal_softmax_bwd<T: Scalar>(dscores: &mut [T], probs: &[T], dout: &[T], t: usize) {
    for ((mat_ds, mat_p), mat_d) in dscores
        .chunks_exact_mut(t * t)
        .zip(probs.chunks_exact(t * t))
        .zip(dout.chunks_exact(t * t))
    {
        for i in 0..t {
            let p = &mat_p[i * t..i * t + i + 1];
            let d = &mat_d[i * t..i * t + i + 1];
            let ds = &mut mat_ds[i * t..i * t + i + 1];
            let mut inner = T::zero();
            for j in 0..=i {
                inner = inner + p[j] * d[j];
            }
            for j in 0..=i {
                ds[j] = ds[j] + p[j] * (d[j] - inner);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation
// ---------------------------------------------------------------------------

#[inline]
fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::of_f64(0.7978845608028654), // sqrt(2/pi)
        T::of_f64(0.044715),
    )
}

pub fn gelu_fwd<T: Scalar>(out: &mut [T], x: &[T]) {
    let (s, c) = gelu_consts::<T>();
    let half = T::of_f64(0.5);
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let u = s * (v + c * v * v * v);
        *o = half * v * (T::one() + u.tanh());
    }
}

pub fn gelu_bwd<T: Scalar>(dx: &mut [T], x: &[T], dout: &[T]) {
    let (s, c) = gelu_consts::<T>();
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    for (d, (&v, &g)) in dx.iter_mut().zip(x.iter().zip(dout.iter())) {
        let u = s * (v + c * v * v * v);
        let t = u.tanh();
        let sech2 = T::one() - t * t;
        let du = s * (T::one() + three * c * v * v);
        let local = half * (T::one() + t) + half * v * sech2 * du;
        *d = *d + g * local;
    }
}

// ---------------------------------------------------------------------------
// cross entropy over logits [rows, vocab]
// ---------------------------------------------------------------------------

pub fn cross_entropy_fwd<T: Scalar>(logits: &[T], targets: &[u32], vocab: usize) -> Result<T> {
    let rows = targets.len();
    debug_assert_eq!(logits.len(), rows * vocab);
    let mut total = 0.0f64;
    for (r, &target) in targets.iter().enumerate() {
        if target as usize >= vocab {
            return Err(Error::IndexOutOfRange {
                what: "target token",
                value: target as usize,
                limit: vocab,
            });
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut maxv = row[0];
        for &v in &row[1..] {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum = sum + (v - maxv).exp();
        }
        let lse = maxv.as_f64() + sum.as_f64().ln();
        total += lse - row[target as usize].as_f64();
    }
    Ok(T::of_f64(total / rows as f64))
}

/// dlogits += (softmax(logits) - onehot(target)) / rows
pub fn cross_entropy_bwd<T: Scalar>(dlogits: &mut [T], logits: &[T], targets: &[u32], vocab: usize) {
    let rows = targets.len();
    let scale = T::one() / T::from_usize(rows);
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        let mut maxv = row[0];
        for &v in &row[1..] {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum = sum + (v - maxv).exp();
        }
        let inv = T::one() / sum;
        for j in 0..vocab {
            let p = (row[j] - maxv).exp() * inv;
            let ind = if j == target as usize { T::one() } else { T::zero() };
            drow[j] = drow[j] + (p - ind) * scale;
        }
    }
}

// ---------------------------------------------------------------------------
// inverted dropout
// ---------------------------------------------------------------------------

pub fn dropout_fwd<T: Scalar, R: Rng>(
    out: &mut [T],
    mask: &mut [u8],
    x: &[T],
    p: f32,
    rng: &mut R,
) {
    debug_assert!((0.0..1.0).contains(&p));
    if p == 0.0 {
        out.copy_from_slice(x);
        mask.fill(1);
        return;
    }
    let inv_keep = T::of_f64(1.0 / (1.0 - p as f64));
    for i in 0..x.len() {
        // sequential draw order is part of the determinism contract
        let keep = rng.gen::<f32>() >= p;
        mask[i] = keep as u8;
        out[i] = if keep { x[i] * inv_keep } else { T::zero() };
    }
}

pub fn dropout_bwd<T: Scalar>(dx: &mut [T], mask: &[u8], dout: &[T], p: f32) {
    if p == 0.0 {
        for (d, &g) in dx.iter_mut().zip(dout.iter()) {
            *d = *d + g;
        }
        return;
    }
    let inv_keep = T::of_f64(1.0 / (1.0 - p as f64));
    for i in 0..dx.len() {
        if mask[i] == 1 {
            dx[i] = dx[i] + dout[i] * inv_keep;
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor-level wrappers (shape contracts)
// ---------------------------------------------------------------------------

/// c = a . b with a folded to [M,K] over leading axes, b strictly [K,N].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.fold_2d();
    if b.shape().len() != 2 || b.shape()[0] != k {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: fmt_shape(a.shape()),
            right: fmt_shape(b.shape()),
        });
    }
    let n = b.shape()[1];
    let mut out_shape: Vec<usize> = a.shape()[..a.shape().len() - 1].to_vec();
    out_shape.push(n);
    let mut out = Tensor::zeros(&out_shape);
    matmul_fwd(out.data_mut(), a.data(), b.data(), m, k, n);
    Ok(out)
}

/// Fresh (dA, dB) for c = a . b given upstream dC.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = a.fold_2d();
    let n = b.shape()[1];
    if dout.len() != m * n {
        return Err(Error::DimensionMismatch {
            op: "matmul_backward",
            left: fmt_shape(dout.shape()),
            right: format!("[{}x{}]", m, n),
        });
    }
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    matmul_bwd(
        da.data_mut(),
        db.data_mut(),
        dout.data(),
        a.data(),
        b.data(),
        m,
        k,
        n,
    );
    Ok((da, db))
}

/// y = gamma * (x - mean)/sqrt(var + eps) + beta over the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (rows, cols) = x.fold_2d();
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::DimensionMismatch {
            op: "layer_norm",
            left: fmt_shape(x.shape()),
            right: format!("gamma {} / beta {}", fmt_shape(gamma.shape()), fmt_shape(beta.shape())),
        });
    }
    if eps <= T::zero() {
        return Err(Error::contract("layer_norm eps must be > 0"));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    layer_norm_fwd(
        out.data_mut(),
        &mut mean,
        &mut rstd,
        x.data(),
        gamma.data(),
        beta.data(),
        cols,
        eps,
    );
    Ok(out)
}

/// Row-wise causal softmax over the last two axes (which must be square).
pub fn causal_softmax<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = scores.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::DimensionMismatch {
            op: "causal_softmax",
            left: fmt_shape(shape),
            right: "[...xTxT]".to_string(),
        });
    }
    let t = shape[shape.len() - 1];
    let mut out = Tensor::zeros(shape);
    causal_softmax_fwd(out.data_mut(), scores.data(), t);
    Ok(out)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    gelu_fwd(out.data_mut(), x.data());
    out
}

/// Mean negative log-likelihood of `targets` under `logits` [..., V].
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<T> {
    let (rows, vocab) = logits.fold_2d();
    if rows != targets.len() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy",
            left: fmt_shape(logits.shape()),
            right: format!("{} targets", targets.len()),
        });
    }
    cross_entropy_fwd(logits.data(), targets, vocab)
}

/// dlogits for the mean-NLL loss (fresh tensor).
pub fn cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<Tensor<T>> {
    let (rows, vocab) = logits.fold_2d();
    if rows != targets.len() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy_backward",
            left: fmt_shape(logits.shape()),
            right: format!("{} targets", targets.len()),
        });
    }
    for &t in targets {
        if t as usize >= vocab {
            return Err(Error::IndexOutOfRange {
                what: "target token",
                value: t as usize,
                limit: vocab,
            });
        }
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    cross_entropy_bwd(dlogits.data_mut(), logits.data(), targets, vocab);
    Ok(dlogits)
}
