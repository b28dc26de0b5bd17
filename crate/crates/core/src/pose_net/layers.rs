//! Forward and backward kernels for the pose network, operating on flat
//! row-major buffers. Feature maps are channel-major (`C x H x W`).

pub(crate) use crate::linalg::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h - self.k + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.k + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unrolls every `k x k` patch into a column: `col` is `patch_len x out_pixels`.
pub fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let src = &plane[(y + ky) * g.w + kx..(y + ky) * g.w + kx + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

pub fn col2im_add(g: &ConvGeom, col: &[f64], d_input: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut d_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let dst = &mut plane[(y + ky) * g.w + kx..(y + ky) * g.w + kx + ow];
                    for (d, s) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid convolution (cross-correlation) with bias. Fills `col` for reuse
/// in the backward pass.
pub fn conv_forward(
    g: &ConvGeom,
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    col: &mut [f64],
    out: &mut [f64],
) {
    im2col(g, input, col);
    let p = g.out_pixels();
    for (c, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.fill(bias[c]);
    }
    gemm(g.c_out, g.patch_len(), p, weights, false, col, false, 1.0, out);
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    g: &ConvGeom,
    col: &[f64],
    weights: &[f64],
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<(&mut [f64], &mut [f64])>,
) {
    let p = g.out_pixels();
    gemm(g.c_out, p, g.patch_len(), d_out, false, col, true, 1.0, d_weights);
    for (c, chunk) in d_out.chunks_exact(p).enumerate() {
        d_bias[c] += chunk.iter().sum::<f64>();
    }
    if let Some((d_input, d_col)) = d_input {
        gemm(g.patch_len(), g.c_out, p, weights, true, d_out, false, 0.0, d_col);
        d_input.fill(0.0);
        col2im_add(g, d_col, d_input);
    }
}

pub fn relu_forward(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
/// `argmax` receives the flat input index of each selected element.
pub fn maxpool_forward(
    c: usize,
    h: usize,
    w: usize,
    input: &[f64],
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = input[best];
                argmax[o] = best;
            }
        }
    }
}

pub fn maxpool_backward(argmax: &[usize], d_out: &[f64], d_input: &mut [f64]) {
    d_input.fill(0.0);
    for (&idx, &g) in argmax.iter().zip(d_out) {
        d_input[idx] += g;
    }
}

/// `y = x * W^T + b` for a batch: `x` is `batch x n_in`, `W` is `n_out x n_in`.
pub fn dense_forward(
    batch: usize,
    n_in: usize,
    n_out: usize,
    x: &[f64],
    weights: &[f64],
    bias: &[f64],
    y: &mut [f64],
) {
    for row in y.chunks_exact_mut(n_out).take(batch) {
        row.copy_from_slice(bias);
    }
    gemm(batch, n_in, n_out, x, false, weights, true, 1.0, y);
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    batch: usize,
    n_in: usize,
    n_out: usize,
    x: &[f64],
    weights: &[f64],
    d_y: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    d_x: Option<&mut [f64]>,
) {
    gemm(n_out, batch, n_in, d_y, true, x, false, 1.0, d_weights);
    for row in d_y.chunks_exact(n_out).take(batch) {
        for (b, g) in d_bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    if let Some(d_x) = d_x {
        gemm(batch, n_out, n_in, d_y, false, weights, false, 0.0, d_x);
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
pub fn apply_mask(x: &mut [f64], mask: &[f64]) {
    for (v, m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

#[cfg(test)]
mod tests {
    //! Each kernel is checked against central finite differences of the
    //! scalar loss `L = sum(r * out)` for a fixed random `r`.
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-4;
    const REL_TOL: f64 = 1e-3;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn naive_conv(g: &ConvGeom, input: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                acc += w[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                    * input[(ci * g.h + y + ky) * g.w + x + kx];
                            }
                        }
                    }
                    out[(co * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b_t = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &a_t, true, &b_t, true, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn conv_matches_naive_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ConvGeom { c_in: 2, h: 7, w: 6, c_out: 3, k: 3 };
        let x = rand_vec(&mut rng, 2 * 7 * 6);
        let w = rand_vec(&mut rng, 3 * 2 * 9);
        let b = vec![0.0; 3];
        let mut col = vec![0.0; g.patch_len() * g.out_pixels()];
        let mut out = vec![0.0; 3 * g.out_pixels()];
        conv_forward(&g, &x, &w, &b, &mut col, &mut out);
        let naive = naive_conv(&g, &x, &w, &b);
        for (a, n) in out.iter().zip(&naive) {
            assert!((a - n).abs() < 1e-12);
        }
        // linear in the input for fixed weights and zero bias
        let x2 = rand_vec(&mut rng, x.len());
        let mix: Vec<f64> = x.iter().zip(&x2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let mut out2 = vec![0.0; out.len()];
        let mut out_mix = vec![0.0; out.len()];
        conv_forward(&g, &x2, &w, &b, &mut col, &mut out2);
        conv_forward(&g, &mix, &w, &b, &mut col, &mut out_mix);
        for i in 0..out.len() {
            assert!((out_mix[i] - (2.0 * out[i] - 0.5 * out2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom { c_in: 2, h: 6, w: 7, c_out: 3, k: 3 };
        let x = rand_vec(&mut rng, 2 * 6 * 7);
        let w = rand_vec(&mut rng, 3 * 2 * 9);
        let b = rand_vec(&mut rng, 3);
        let r = rand_vec(&mut rng, 3 * g.out_pixels());
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&naive_conv(&g, x, w, b), &r);

        let mut col = vec![0.0; g.patch_len() * g.out_pixels()];
        let mut out = vec![0.0; r.len()];
        conv_forward(&g, &x, &w, &b, &mut col, &mut out);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let mut dx = vec![0.0; x.len()];
        let mut dcol = vec![0.0; col.len()];
        conv_backward(&g, &col, &w, &r, &mut dw, &mut db, Some((&mut dx, &mut dcol)));

        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += STEP;
            wm[i] -= STEP;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * STEP);
            assert!(rel_err(dw[i], fd) < REL_TOL, "w[{i}] {} vs {fd}", dw[i]);
        }
        for i in 0..3 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += STEP;
            bm[i] -= STEP;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * STEP);
            assert!(rel_err(db[i], fd) < REL_TOL);
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += STEP;
            xm[i] -= STEP;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * STEP);
            assert!(rel_err(dx[i], fd) < REL_TOL, "x[{i}] {} vs {fd}", dx[i]);
        }
    }

    #[test]
    fn maxpool_bounded_by_window_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (2, 5, 6);
        let x = rand_vec(&mut rng, c * h * w);
        let mut out = vec![0.0; c * 2 * 3];
        let mut arg = vec![0; out.len()];
        maxpool_forward(c, h, w, &x, &mut out, &mut arg);
        for ch in 0..c {
            for y in 0..2 {
                for xx in 0..3 {
                    let win = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dy, dx)| x[ch * h * w + (2 * y + dy) * w + 2 * xx + dx]);
                    let m = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(out[ch * 6 + y * 3 + xx], m);
                }
            }
        }
        let r = rand_vec(&mut rng, out.len());
        let mut dx = vec![0.0; x.len()];
        maxpool_backward(&arg, &r, &mut dx);
        let loss = |x: &[f64]| {
            let mut o = vec![0.0; r.len()];
            let mut a = vec![0; r.len()];
            maxpool_forward(c, h, w, x, &mut o, &mut a);
            dot(&o, &r)
        };
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += STEP;
            xm[i] -= STEP;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * STEP);
            assert!((dx[i] - fd).abs() <= REL_TOL * fd.abs().max(1e-6) + 1e-9);
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (batch, n_in, n_out) = (3, 5, 4);
        let x = rand_vec(&mut rng, batch * n_in);
        let w = rand_vec(&mut rng, n_out * n_in);
        let b = rand_vec(&mut rng, n_out);
        let r = rand_vec(&mut rng, batch * n_out);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut y = vec![0.0; batch * n_out];
            dense_forward(batch, n_in, n_out, x, w, b, &mut y);
            dot(&y, &r)
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; n_out];
        let mut dx = vec![0.0; x.len()];
        dense_backward(batch, n_in, n_out, &x, &w, &r, &mut dw, &mut db, Some(&mut dx));
        let check = |analytic: &[f64], which: usize| {
            let base = [x.clone(), w.clone(), b.clone()];
            for i in 0..analytic.len() {
                let mut p = base.clone();
                let mut m = base.clone();
                p[which][i] += STEP;
                m[which][i] -= STEP;
                let fd = (loss(&p[0], &p[1], &p[2]) - loss(&m[0], &m[1], &m[2])) / (2.0 * STEP);
                assert!(rel_err(analytic[i], fd) < REL_TOL);
            }
        };
        check(&dx, 0);
        check(&dw, 1);
        check(&db, 2);
    }

    #[test]
    fn relu_and_mask_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = rand_vec(&mut rng, 20)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
            .collect();
        let mask: Vec<f64> = (0..20).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
        let r = rand_vec(&mut rng, 20);
        let loss = |x: &[f64]| {
            let mut y = x.to_vec();
            relu_forward(&mut y);
            apply_mask(&mut y, &mask);
            dot(&y, &r)
        };
        let mut y = x.clone();
        relu_forward(&mut y);
        let mut g = r.clone();
        apply_mask(&mut g, &mask);
        relu_backward(&y, &mut g);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += STEP;
            xm[i] -= STEP;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * STEP);
            assert!((g[i] - fd).abs() < 1e-9);
        }
    }
}
