//! Scalar compute kernels shared by the autodiff tape and the inference
//! engine. Both callers route through these exact loops, which is what makes
//! cached decoding, uncached decoding, and tape forwards agree bitwise.
//!
//! Reduction order rules: matmul accumulates over k in ascending order with
//! independent per-column accumulators; dot products reduce in the fixed
//! four-lane order below; row reductions run left to right. Work is only
//! ever split by output row, so results do not depend on the worker count.

use crate::scalar::Scalar;
use crate::threads::workers;

/// Dot product with four independent accumulators combined in a fixed shape.
/// Every caller that needs a dot must use this one.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        acc[0] = acc[0] + ca[0] * cb[0];
        acc[1] = acc[1] + ca[1] * cb[1];
        acc[2] = acc[2] + ca[2] * cb[2];
        acc[3] = acc[3] + ca[3] * cb[3];
    }
    let mut tail = S::zero();
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail = tail + *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out += s * x
pub fn axpy<S: Scalar>(s: S, x: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o = *o + s * *v;
    }
}

/// C = A @ B for row-major A [m,k], B [k,n].
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(c.len(), m * n);
    c.fill(S::zero());
    matmul_acc(a, b, m, k, n, c);
}

/// C += A @ B. Accumulation for each output element runs over k in ascending
/// order (ikj loop), independent per column.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let nw = workers().min(m / 16).max(1);
    if nw == 1 {
        return matmul_rows(a, b, k, n, c);
    }
    let rows_per = m.div_ceil(nw);
    std::thread::scope(|scope| {
        for (a_chunk, c_chunk) in a.chunks(rows_per * k).zip(c.chunks_mut(rows_per * n)) {
            scope.spawn(move || matmul_rows(a_chunk, b, k, n, c_chunk));
        }
    });
}

fn matmul_rows<S: Scalar>(a_rows: &[S], b: &[S], k: usize, n: usize, c_rows: &mut [S]) {
    for (a_row, c_row) in a_rows.chunks_exact(k).zip(c_rows.chunks_exact_mut(n)) {
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cc, &bv) in c_row.iter_mut().zip(b_row) {
                *cc = *cc + av * bv;
            }
        }
    }
}

/// B^T copy: input [r, c] row-major, output [c, r].
pub fn transpose<S: Scalar>(x: &[S], r: usize, c: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), r * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

/// RMS-normalizes one row into `out` (weight applied) and returns 1/rms(x).
pub fn rmsnorm_row<S: Scalar>(x: &[S], w: &[S], eps: S, out: &mut [S]) -> S {
    let d = x.len();
    let mut ss = S::zero();
    for &v in x {
        ss = ss + v * v;
    }
    let inv = (ss / S::from_f64(d as f64) + eps).sqrt().recip();
    for ((o, &v), &wi) in out.iter_mut().zip(x).zip(w) {
        *o = v * inv * wi;
    }
    inv
}

/// Numerically-stable softmax of one row, in place.
pub fn softmax_row<S: Scalar>(x: &mut [S]) {
    let mut m = S::neg_infinity();
    for &v in x.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in x.iter_mut() {
        *v = *v * inv;
    }
}

/// x * sigmoid(x)
pub fn silu<S: Scalar>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

/// Rotary position entry: (cos, sin) for pair index `i` of `half` pairs at
/// absolute position `pos`. Angles are computed in f64 so both precisions
/// see the same rotation up to their own rounding.
pub fn rope_angle(pos: usize, i: usize, half: usize, theta: f64) -> (f64, f64) {
    let freq = theta.powf(-(i as f64) / half as f64);
    let angle = pos as f64 * freq;
    (angle.cos(), angle.sin())
}

/// Rotates one head's row in place. Pairs are split-halves: (x[i], x[i+half]).
pub fn rope_rotate_row<S: Scalar>(x: &mut [S], pos: usize, theta: f64) {
    debug_assert_eq!(x.len() % 2, 0);
    let half = x.len() / 2;
    for i in 0..half {
        let (c, s) = rope_angle(pos, i, half, theta);
        let (c, s) = (S::from_f64(c), S::from_f64(s));
        let a = x[i];
        let b = x[i + half];
        x[i] = a * c - b * s;
        x[i + half] = a * s + b * c;
    }
}

/// Inverse rotation, used by the backward pass.
pub fn rope_rotate_row_inv<S: Scalar>(x: &mut [S], pos: usize, theta: f64) {
    let half = x.len() / 2;
    for i in 0..half {
        let (c, s) = rope_angle(pos, i, half, theta);
        let (c, s) = (S::from_f64(c), S::from_f64(s));
        let a = x[i];
        let b = x[i + half];
        x[i] = a * c + b * s;
        x[i + half] = b * c - a * s;
    }
}

/// Copies one head's rows out of [batch*seq, heads*head_dim] into a
/// contiguous [seq, head_dim] buffer.
pub fn pack_head<S: Scalar>(
    x: &[S],
    b: usize,
    h: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
    out: &mut [S],
) {
    let width = heads * head_dim;
    for t in 0..seq {
        let src = (b * seq + t) * width + h * head_dim;
        out[t * head_dim..(t + 1) * head_dim].copy_from_slice(&x[src..src + head_dim]);
    }
}

/// Attention for a single query row against `len` key/value rows (all of
/// them visible to this query). `keys`/`vals` are contiguous [len, head_dim].
/// Writes softmax weights into `probs[..len]` and the context into `out`.
pub fn attn_row<S: Scalar>(
    q: &[S],
    keys: &[S],
    vals: &[S],
    len: usize,
    scale: S,
    probs: &mut [S],
    out: &mut [S],
) {
    let hd = q.len();
    for j in 0..len {
        probs[j] = dot(q, &keys[j * hd..(j + 1) * hd]) * scale;
    }
    softmax_row(&mut probs[..len]);
    out.fill(S::zero());
    for j in 0..len {
        axpy(probs[j], &vals[j * hd..(j + 1) * hd], out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] @ [[5],[6]] = [[17],[39]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0];
        let mut c = [0.0f32; 2];
        matmul(&a, &b, 2, 2, 1, &mut c);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let x = [3.0f32, -1.0, 0.5, 2.0, 7.0, -4.0];
        let eye = [1.0f32, 0.0, 0.0, 1.0];
        let mut c = [0.0f32; 6];
        matmul(&x, &eye, 3, 2, 2, &mut c);
        assert_eq!(c, x);
    }

    #[test]
    fn matmul_empty_lhs() {
        let a: [f32; 0] = [];
        let b = [1.0f32; 12];
        let mut c: [f32; 0] = [];
        matmul(&a, &b, 0, 3, 4, &mut c);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..23).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let b: Vec<f64> = (0..23).map(|i| (i as f64) * -0.11 + 1.0).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let mut x = [0.0f32, 0.0];
        softmax_row(&mut x);
        assert_eq!(x, [0.5, 0.5]);

        let mut y = [3.0f64.ln(), 0.0];
        softmax_row(&mut y);
        assert!((y[0] - 0.75).abs() < 1e-12);
        assert!((y[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_magnitude_is_stable() {
        let mut x = [1000.0f32, 0.0];
        softmax_row(&mut x);
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_hand_example() {
        // [3,4] with unit weight, eps 0: rms = sqrt(12.5)
        let x = [3.0f32, 4.0];
        let w = [1.0f32, 1.0];
        let mut out = [0.0f32; 2];
        rmsnorm_row(&x, &w, 0.0, &mut out);
        let rms = 12.5f64.sqrt();
        assert!((out[0] as f64 - 3.0 / rms).abs() < 1e-6);
        assert!((out[1] as f64 - 4.0 / rms).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_constant_row_normalizes_to_unit_magnitude() {
        let x = [7.0f32; 8];
        let w = [1.0f32; 8];
        let mut out = [0.0f32; 8];
        rmsnorm_row(&x, &w, 0.0, &mut out);
        for v in out {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let orig: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut x = orig.clone();
        rope_rotate_row(&mut x, 13, 10_000.0);
        assert!(x.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_rotate_row_inv(&mut x, 13, 10_000.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let orig: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let mut x = orig.clone();
        rope_rotate_row(&mut x, 0, 10_000.0);
        assert_eq!(x, orig);
    }

    #[test]
    fn attn_row_single_key_copies_value() {
        let q = [0.3f32, -0.2, 0.9, 0.0];
        let k = [1.0f32, 2.0, -1.0, 0.5];
        let v = [5.0f32, 6.0, 7.0, 8.0];
        let mut probs = [0.0f32; 1];
        let mut out = [0.0f32; 4];
        attn_row(&q, &k, &v, 1, 0.5, &mut probs, &mut out);
        assert_eq!(probs[0], 1.0);
        assert_eq!(out, v);
    }

    #[test]
    fn matmul_whole_matrix_matches_row_at_a_time() {
        let m = 64;
        let k = 48;
        let n = 32;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32 - 50.0) * 0.01).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 97) as f32 - 48.0) * 0.02).collect();
        let mut big = vec![0.0f32; m * n];
        matmul(&a, &b, m, k, n, &mut big);
        for i in 0..m {
            let mut row = vec![0.0f32; n];
            matmul(&a[i * k..(i + 1) * k], &b, 1, k, n, &mut row);
            assert_eq!(&big[i * n..(i + 1) * n], &row[..], "row {i}");
        }
    }
}
