//! Low-level compute kernels shared by the raw forward passes and the tape.
//!
//! Every kernel accumulates each output element in a fixed order (ascending
//! reduction index, fused `mul_add`), so the same logical value is
//! bit-identical no matter which code path produced it: tiled vs. streaming
//! GEMM, cached vs. uncached attention, tape vs. raw forward. Parallelism
//! partitions output elements and never splits a reduction, so results do
//! not depend on the worker count.

use super::Real;
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Globally enable or disable intra-op parallelism (benchmarks run serial).
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

// ── GEMM ────────────────────────────────────────────────────────────────────

const MR: usize = 8;
const NR: usize = 16;

/// c[m,n] = a[m,k] · b[k,n], row-major, c overwritten.
pub fn gemm_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if m <= 4 {
        // Decode path: stream the weight matrix once, keep the few output
        // rows hot in L1. A width-2 call costs about one weight pass, same
        // as width-1, which is what the alternating schedule banks on.
        c.fill(F::ZERO);
        match m {
            1 => {
                for p in 0..k {
                    let a0 = a[p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, &bj) in c.iter_mut().zip(brow) {
                        *cj = a0.mul_add(bj, *cj);
                    }
                }
            }
            2 => {
                let (c0, c1) = c.split_at_mut(n);
                for p in 0..k {
                    let a0 = a[p];
                    let a1 = a[k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        let bj = brow[j];
                        c0[j] = a0.mul_add(bj, c0[j]);
                        c1[j] = a1.mul_add(bj, c1[j]);
                    }
                }
            }
            _ => {
                for (i, crow) in c.chunks_exact_mut(n).enumerate() {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        let brow = &b[p * n..(p + 1) * n];
                        for (cj, &bj) in crow.iter_mut().zip(brow) {
                            *cj = aip.mul_add(bj, *cj);
                        }
                    }
                }
            }
        }
        return;
    }

    let run_block = |ab: &[F], cb: &mut [F]| {
        let rows = cb.len() / n;
        let mut j0 = 0;
        while j0 < n {
            let jw = NR.min(n - j0);
            if rows == MR && jw == NR {
                microkernel_8x16(ab, b, cb, k, n, j0);
            } else {
                tile_generic(ab, b, cb, rows, k, n, j0, jw);
            }
            j0 += jw;
        }
    };

    if parallel_enabled() && m >= 2 * MR && m * k * n >= 1 << 18 {
        c.par_chunks_mut(MR * n)
            .zip(a.par_chunks(MR * k))
            .for_each(|(cb, ab)| run_block(ab, cb));
    } else {
        c.chunks_mut(MR * n)
            .zip(a.chunks(MR * k))
            .for_each(|(cb, ab)| run_block(ab, cb));
    }
}

#[inline(always)]
fn microkernel_8x16<F: Real>(a: &[F], b: &[F], c: &mut [F], k: usize, n: usize, j0: usize) {
    let mut acc = [[F::ZERO; NR]; MR];
    for p in 0..k {
        let bp = &b[p * n + j0..p * n + j0 + NR];
        for r in 0..MR {
            let arp = a[r * k + p];
            let accr = &mut acc[r];
            for u in 0..NR {
                accr[u] = arp.mul_add(bp[u], accr[u]);
            }
        }
    }
    for r in 0..MR {
        c[r * n + j0..r * n + j0 + NR].copy_from_slice(&acc[r]);
    }
}

#[inline]
fn tile_generic<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    rows: usize,
    k: usize,
    n: usize,
    j0: usize,
    jw: usize,
) {
    let mut acc = [[F::ZERO; NR]; MR];
    for p in 0..k {
        let bp = &b[p * n + j0..p * n + j0 + jw];
        for r in 0..rows {
            let arp = a[r * k + p];
            let accr = &mut acc[r];
            for u in 0..jw {
                accr[u] = arp.mul_add(bp[u], accr[u]);
            }
        }
    }
    for r in 0..rows {
        c[r * n + j0..r * n + j0 + jw].copy_from_slice(&acc[r][..jw]);
    }
}

/// Lane-split dot product with a fixed reduction tree.
///
/// The single canonical routine for every dot product in the crate, so a
/// score or logit computed against cached rows matches a monolithic
/// recomputation bit for bit.
#[inline]
pub fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    const L: usize = 8;
    let mut acc = [F::ZERO; L];
    let chunks = x.len() / L;
    for c in 0..chunks {
        let xb = &x[c * L..(c + 1) * L];
        let yb = &y[c * L..(c + 1) * L];
        for l in 0..L {
            acc[l] = xb[l].mul_add(yb[l], acc[l]);
        }
    }
    for (l, i) in (chunks * L..x.len()).enumerate() {
        acc[l] = x[i].mul_add(y[i], acc[l]);
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    (s01 + s23) + (s45 + s67)
}

/// c[m,n] = a[m,k] · bt[n,k]ᵀ via row dots. Used where the right-hand side
/// is stored transposed (tied classifier); stable across any m.
pub fn gemm_nt_dots<F: Real>(a: &[F], bt: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |crow: &mut [F], arow: &[F]| {
        for (j, cj) in crow.iter_mut().enumerate() {
            *cj = dot(arow, &bt[j * k..(j + 1) * k]);
        }
    };
    if parallel_enabled() && m >= 16 && m * k * n >= 1 << 18 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| row(crow, arow));
    } else {
        c.chunks_mut(n)
            .zip(a.chunks(k))
            .for_each(|(crow, arow)| row(crow, arow));
    }
}

/// bt[c,r] = b[r,c]ᵀ, scratch for the backward GEMMs.
pub fn transpose<F: Real>(b: &[F], r: usize, c: usize) -> Vec<F> {
    debug_assert_eq!(b.len(), r * c);
    let mut out = vec![F::ZERO; r * c];
    const BLK: usize = 32;
    for i0 in (0..r).step_by(BLK) {
        for j0 in (0..c).step_by(BLK) {
            for i in i0..(i0 + BLK).min(r) {
                for j in j0..(j0 + BLK).min(c) {
                    out[j * r + i] = b[i * c + j];
                }
            }
        }
    }
    out
}

// ── Elementwise ─────────────────────────────────────────────────────────────

/// dst += src
pub fn add_assign<F: Real>(dst: &mut [F], src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// dst += scale · src
pub fn axpy<F: Real>(dst: &mut [F], scale: F, src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = scale.mul_add(s, *d);
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

pub fn silu_forward<F: Real>(x: &[F], out: &mut [F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * sigmoid(v);
    }
}

/// dx += d(silu)/dx ⊙ dy
pub fn silu_backward<F: Real>(x: &[F], dy: &[F], dx: &mut [F]) {
    for ((g, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
        let s = sigmoid(v);
        let grad = s * (F::ONE + v * (F::ONE - s));
        *g = grad.mul_add(d, *g);
    }
}

// ── Normalization and softmax ───────────────────────────────────────────────

/// Sum of squares with the same lane-split scheme as [`dot`].
#[inline]
fn sum_squares<F: Real>(x: &[F]) -> F {
    dot(x, x)
}

/// y_i = gain_i · x_i / sqrt(mean(x²) + eps), one row.
pub fn rms_norm_row<F: Real>(x: &[F], gain: &[F], eps: F, out: &mut [F]) {
    let d = x.len();
    let ms = sum_squares(x) / F::from_f64(d as f64) + eps;
    let inv = F::ONE / ms.sqrt();
    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(gain) {
        *o = gi * xi * inv;
    }
}

/// Accumulates dx and dgain for one row of rms_norm.
pub fn rms_norm_backward_row<F: Real>(
    x: &[F],
    gain: &[F],
    eps: F,
    dy: &[F],
    dx: &mut [F],
    dgain: &mut [F],
) {
    let d = x.len();
    let df = F::from_f64(d as f64);
    let ms = sum_squares(x) / df + eps;
    let r = ms.sqrt();
    let inv = F::ONE / r;
    // t = Σ gain_j · dy_j · x_j
    let mut t = F::ZERO;
    for j in 0..d {
        t = (gain[j] * dy[j]).mul_add(x[j], t);
    }
    let coef = t / (df * r * r * r);
    for j in 0..d {
        dx[j] += gain[j] * dy[j] * inv - x[j] * coef;
        dgain[j] = (dy[j] * x[j]).mul_add(inv, dgain[j]);
    }
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_row<F: Real>(row: &mut [F]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::ONE / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

// ── Rotary embedding ────────────────────────────────────────────────────────

/// Per-pair inverse frequencies theta^(-2i/head_dim).
pub fn rope_inv_freq(head_dim: usize, theta: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| theta.powf(-((2 * i) as f64) / head_dim as f64))
        .collect()
}

/// Rotates consecutive element pairs of every head by pos · inv_freq.
/// `inverse` applies the opposite rotation (used by the backward pass).
pub fn rope_rows<F: Real>(
    x: &mut [F],
    rows: usize,
    heads: usize,
    head_dim: usize,
    positions: &[usize],
    inv_freq: &[f64],
    inverse: bool,
) {
    debug_assert_eq!(positions.len(), rows);
    debug_assert_eq!(head_dim % 2, 0);
    let width = heads * head_dim;
    debug_assert_eq!(x.len(), rows * width);
    for r in 0..rows {
        let pos = positions[r] as f64;
        let row = &mut x[r * width..(r + 1) * width];
        for h in 0..heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for (i, &f) in inv_freq.iter().enumerate() {
                let angle = pos * f;
                let c = F::from_f64(angle.cos());
                let mut s = F::from_f64(angle.sin());
                if inverse {
                    s = -s;
                }
                let x0 = head[2 * i];
                let x1 = head[2 * i + 1];
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

// ── Attention ───────────────────────────────────────────────────────────────

/// Causal attention for `m` query rows against a `t`-row key/value history.
///
/// Query `i` (history index `base + i`) attends to rows `0..=base + i`.
/// Layout is `[rows, heads · head_dim]`; scores are scaled by 1/√head_dim.
/// Streams one score row at a time, no `t × t` buffer.
pub fn attn_forward<F: Real>(
    q: &[F],
    kh: &[F],
    vh: &[F],
    out: &mut [F],
    m: usize,
    t: usize,
    heads: usize,
    head_dim: usize,
    base: usize,
) {
    let width = heads * head_dim;
    debug_assert_eq!(q.len(), m * width);
    debug_assert_eq!(kh.len(), t * width);
    debug_assert_eq!(vh.len(), t * width);
    debug_assert_eq!(out.len(), m * width);
    debug_assert!(base + m <= t);
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut weights = vec![F::ZERO; t];
    let mut acc = vec![F::ZERO; head_dim];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..m {
            let ctx = base + i + 1;
            let qrow = &q[i * width + off..i * width + off + head_dim];
            let w = &mut weights[..ctx];
            let mut max = F::from_f64(f64::NEG_INFINITY);
            for (j, wj) in w.iter_mut().enumerate() {
                let s = dot(qrow, &kh[j * width + off..j * width + off + head_dim]) * scale;
                *wj = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = F::ZERO;
            for wj in w.iter_mut() {
                *wj = (*wj - max).exp();
                sum += *wj;
            }
            acc.fill(F::ZERO);
            for (j, &wj) in w.iter().enumerate() {
                let vrow = &vh[j * width + off..j * width + off + head_dim];
                for (a, &v) in acc.iter_mut().zip(vrow) {
                    *a = wj.mul_add(v, *a);
                }
            }
            let inv = F::ONE / sum;
            for (o, &a) in out[i * width + off..i * width + off + head_dim]
                .iter_mut()
                .zip(&acc)
            {
                *o = a * inv;
            }
        }
    }
}

/// Backward of [`attn_forward`]; recomputes the softmax rows instead of
/// keeping a `t × t` probability buffer. Gradients accumulate into
/// dq/dk/dv, which cover the same row ranges as q and kh/vh.
#[allow(clippy::too_many_arguments)]
pub fn attn_backward<F: Real>(
    q: &[F],
    kh: &[F],
    vh: &[F],
    dout: &[F],
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
    m: usize,
    t: usize,
    heads: usize,
    head_dim: usize,
    base: usize,
) {
    let width = heads * head_dim;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut probs = vec![F::ZERO; t];
    let mut dp = vec![F::ZERO; t];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..m {
            let ctx = base + i + 1;
            let qrow = &q[i * width + off..i * width + off + head_dim];
            let dorow = &dout[i * width + off..i * width + off + head_dim];
            let p = &mut probs[..ctx];
            let mut max = F::from_f64(f64::NEG_INFINITY);
            for (j, pj) in p.iter_mut().enumerate() {
                let s = dot(qrow, &kh[j * width + off..j * width + off + head_dim]) * scale;
                *pj = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = F::ZERO;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let inv = F::ONE / sum;
            for pj in p.iter_mut() {
                *pj = *pj * inv;
            }
            // dp_j = dout · v_j ; delta = Σ p_j dp_j
            let dpr = &mut dp[..ctx];
            let mut delta = F::ZERO;
            for j in 0..ctx {
                let d = dot(dorow, &vh[j * width + off..j * width + off + head_dim]);
                dpr[j] = d;
                delta = p[j].mul_add(d, delta);
            }
            for j in 0..ctx {
                let ds = p[j] * (dpr[j] - delta) * scale;
                // dq_i += ds · k_j ; dk_j += ds · q_i ; dv_j += p_j · dout
                let krow = &kh[j * width + off..j * width + off + head_dim];
                let dqrow = &mut dq[i * width + off..i * width + off + head_dim];
                for (g, &kv) in dqrow.iter_mut().zip(krow) {
                    *g = ds.mul_add(kv, *g);
                }
                let dkrow = &mut dk[j * width + off..j * width + off + head_dim];
                for (g, &qv) in dkrow.iter_mut().zip(qrow) {
                    *g = ds.mul_add(qv, *g);
                }
                let dvrow = &mut dv[j * width + off..j * width + off + head_dim];
                for (g, &dov) in dvrow.iter_mut().zip(dorow) {
                    *g = p[j].mul_add(dov, *g);
                }
            }
        }
    }
}

// ── Cross entropy ───────────────────────────────────────────────────────────

/// Mean negative log-likelihood over unmasked rows. Accumulated in f64.
pub fn cross_entropy_forward<F: Real>(
    logits: &[F],
    vocab: usize,
    targets: &[usize],
    mask: &[bool],
) -> Option<f64> {
    let rows = targets.len();
    debug_assert_eq!(logits.len(), rows * vocab);
    debug_assert_eq!(mask.len(), rows);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut z = F::ZERO;
        for &v in row {
            z += (v - max).exp();
        }
        sum += z.to_f64().ln() + max.to_f64() - row[targets[r]].to_f64();
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// dlogits += upstream/count · (softmax(row) − onehot(target)) per unmasked row.
pub fn cross_entropy_backward<F: Real>(
    logits: &[F],
    vocab: usize,
    targets: &[usize],
    mask: &[bool],
    upstream: F,
    dlogits: &mut [F],
) {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return;
    }
    let g = upstream / F::from_f64(count as f64);
    for r in 0..targets.len() {
        if !mask[r] {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut z = F::ZERO;
        for &v in row {
            z += (v - max).exp();
        }
        let inv = F::ONE / z;
        for (j, dj) in drow.iter_mut().enumerate() {
            let p = (row[j] - max).exp() * inv;
            *dj = g.mul_add(p, *dj);
        }
        drow[targets[r]] = drow[targets[r]] - g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn rand_vec(n: usize, rng: &mut Rng) -> Vec<f32> {
        (0..n).map(|_| rng.next_normal() as f32).collect()
    }

    #[test]
    fn gemm_matches_naive_across_shapes() {
        let mut rng = Rng::new(1);
        for &(m, k, n) in &[
            (1usize, 7usize, 5usize),
            (2, 64, 33),
            (3, 9, 16),
            (4, 16, 16),
            (17, 31, 29),
            (64, 48, 80),
            (9, 128, 257),
        ] {
            let a = rand_vec(m * k, &mut rng);
            let b = rand_vec(k * n, &mut rng);
            let mut c = vec![0.0f32; m * n];
            gemm_nn(&a, &b, &mut c, m, k, n);
            let want = naive_gemm(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-3, "{x} vs {y} at ({m},{k},{n})");
            }
        }
    }

    #[test]
    fn gemm_rows_are_path_independent() {
        // The m=1 streaming path and the tiled path must agree bit for bit:
        // this is what makes cached and uncached decoding emit identical
        // tokens.
        let mut rng = Rng::new(2);
        let (m, k, n) = (24usize, 96usize, 112usize);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(k * n, &mut rng);
        let mut big = vec![0.0f32; m * n];
        gemm_nn(&a, &b, &mut big, m, k, n);
        for i in 0..m {
            let mut one = vec![0.0f32; n];
            gemm_nn(&a[i * k..(i + 1) * k], &b, &mut one, 1, k, n);
            assert_eq!(one, big[i * n..(i + 1) * n].to_vec(), "row {i}");
        }
        let mut two = vec![0.0f32; 2 * n];
        gemm_nn(&a[..2 * k], &b, &mut two, 2, k, n);
        assert_eq!(two, big[..2 * n].to_vec());
    }

    #[test]
    fn gemm_nt_matches_naive() {
        let mut rng = Rng::new(3);
        let (m, k, n) = (5usize, 40usize, 11usize);
        let a = rand_vec(m * k, &mut rng);
        let bt = rand_vec(n * k, &mut rng);
        let b = transpose(&bt, n, k);
        let mut c = vec![0.0f32; m * n];
        gemm_nt_dots(&a, &bt, &mut c, m, k, n);
        let want = naive_gemm(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = Rng::new(4);
        let (r, c) = (37usize, 53usize);
        let a = rand_vec(r * c, &mut rng);
        let t = transpose(&a, r, c);
        let back = transpose(&t, c, r);
        assert_eq!(a, back);
    }

    #[test]
    fn softmax_row_sums_to_one_and_survives_big_logits() {
        let mut row = vec![1000.0f32, 0.0];
        softmax_row(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-6);
        assert!(row[1] >= 0.0 && row[1] < 1e-6);
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let scale = 10f64.powf(rng.next_f64() * 6.0 - 3.0);
            let mut row: Vec<f32> = (0..17)
                .map(|_| (rng.next_normal() * scale) as f32)
                .collect();
            softmax_row(&mut row);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum {sum} at scale {scale}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = Rng::new(6);
        let (rows, heads, hd) = (5usize, 3usize, 8usize);
        let x0 = rand_vec(rows * heads * hd, &mut rng);
        let mut x = x0.clone();
        let inv_freq = rope_inv_freq(hd, 10000.0);
        let positions: Vec<usize> = vec![0, 1, 1, 2, 7];
        rope_rows(&mut x, rows, heads, hd, &positions, &inv_freq, false);
        for r in 0..rows {
            for h in 0..heads {
                for i in 0..hd / 2 {
                    let at = r * heads * hd + h * hd + 2 * i;
                    let n0 = (x0[at].powi(2) + x0[at + 1].powi(2)).sqrt();
                    let n1 = (x[at].powi(2) + x[at + 1].powi(2)).sqrt();
                    assert!((n0 - n1).abs() < 1e-5, "pair norm changed: {n0} vs {n1}");
                }
            }
        }
        // position 0 row untouched
        assert_eq!(&x[..heads * hd], &x0[..heads * hd]);
        // inverse rotation restores the input (up to rounding)
        rope_rows(&mut x, rows, heads, hd, &positions, &inv_freq, true);
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let vocab = 256;
        let logits = vec![0.0f32; 2 * vocab];
        let loss = cross_entropy_forward(&logits, vocab, &[3, 200], &[true, true]).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_empty_mask_is_none() {
        let logits = vec![0.0f32; 8];
        assert!(cross_entropy_forward(&logits, 4, &[0, 1], &[false, false]).is_none());
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = Rng::new(7);
        let (t, heads, hd) = (6usize, 2usize, 4usize);
        let width = heads * hd;
        let q = rand_vec(t * width, &mut rng);
        let k = rand_vec(t * width, &mut rng);
        let v = rand_vec(t * width, &mut rng);
        let mut out = vec![0.0f32; t * width];
        attn_forward(&q, &k, &v, &mut out, t, t, heads, hd, 0);
        // Perturb the last key/value row: earlier outputs must not change.
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for x in &mut k2[(t - 1) * width..] {
            *x += 1.0;
        }
        for x in &mut v2[(t - 1) * width..] {
            *x += 1.0;
        }
        let mut out2 = vec![0.0f32; t * width];
        attn_forward(&q, &k2, &v2, &mut out2, t, t, heads, hd, 0);
        assert_eq!(
            out[..(t - 1) * width].to_vec(),
            out2[..(t - 1) * width].to_vec()
        );
        assert_ne!(out[(t - 1) * width..], out2[(t - 1) * width..]);
    }

    #[test]
    fn attention_cached_matches_monolithic_bitwise() {
        let mut rng = Rng::new(8);
        let (t, heads, hd) = (9usize, 2usize, 8usize);
        let width = heads * hd;
        let q = rand_vec(t * width, &mut rng);
        let k = rand_vec(t * width, &mut rng);
        let v = rand_vec(t * width, &mut rng);
        let mut mono = vec![0.0f32; t * width];
        attn_forward(&q, &k, &v, &mut mono, t, t, heads, hd, 0);
        // Incremental: one query at a time against the growing prefix.
        for i in 0..t {
            let mut step = vec![0.0f32; width];
            attn_forward(
                &q[i * width..(i + 1) * width],
                &k[..(i + 1) * width],
                &v[..(i + 1) * width],
                &mut step,
                1,
                i + 1,
                heads,
                hd,
                i,
            );
            assert_eq!(step, mono[i * width..(i + 1) * width].to_vec(), "row {i}");
        }
    }

    #[test]
    #[ignore = "manual perf probe: cargo test --release -- --ignored perf"]
    fn perf_probe_gemm() {
        let mut rng = Rng::new(42);
        for &(m, k, n) in &[(4096usize, 256usize, 256usize), (4096, 256, 512), (2, 512, 512)] {
            let a = rand_vec(m * k, &mut rng);
            let b = rand_vec(k * n, &mut rng);
            let mut c = vec![0.0f32; m * n];
            let reps = (2e10 / (2.0 * (m * k * n) as f64)).max(3.0) as usize;
            let start = std::time::Instant::now();
            for _ in 0..reps {
                gemm_nn(&a, &b, &mut c, m, k, n);
            }
            let el = start.elapsed().as_secs_f64();
            let gflops = 2.0 * (m * k * n) as f64 * reps as f64 / el / 1e9;
            println!("gemm {m}x{k}x{n}: {gflops:.1} GFLOP/s ({reps} reps)");
        }
    }
}
