//! Differentiable building blocks over row-major token matrices.
//!
//! Every op has a forward that returns whatever its backward needs and a
//! backward that returns the input gradient while accumulating parameter
//! gradients into caller-provided slices.

use super::tensor::{axpy, dot, Mat};

pub const LN_EPS: f64 = 1e-5;

/// `y = x Wᵀ + b` with `w` laid out `out × in`.
pub fn linear(x: &Mat, w: &[f64], b: Option<&[f64]>, out: usize) -> Mat {
    let inp = x.cols;
    debug_assert_eq!(w.len(), out * inp);
    let mut y = Mat::zeros(x.rows, out);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * inp..(o + 1) * inp]);
        }
        if let Some(b) = b {
            for (yo, bo) in yr.iter_mut().zip(b) {
                *yo += *bo;
            }
        }
    }
    y
}

/// Backward of [`linear`]. Returns `dx`; accumulates `dW += dyᵀ x` and `db += Σ dy`.
pub fn linear_backward(x: &Mat, w: &[f64], dy: &Mat, dw: Option<&mut [f64]>, db: Option<&mut [f64]>) -> Mat {
    let inp = x.cols;
    let mut dx = Mat::zeros(x.rows, inp);
    for r in 0..x.rows {
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for (o, &g) in dyr.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w[o * inp..(o + 1) * inp], dxr);
            }
        }
    }
    if let Some(dw) = dw {
        accumulate_outer(x, dy, dw);
    }
    if let Some(db) = db {
        for r in 0..dy.rows {
            for (d, g) in db.iter_mut().zip(dy.row(r)) {
                *d += *g;
            }
        }
    }
    dx
}

/// `acc += dyᵀ x` for `acc` laid out `dy.cols × x.cols`.
pub fn accumulate_outer(x: &Mat, dy: &Mat, acc: &mut [f64]) {
    let inp = x.cols;
    debug_assert_eq!(acc.len(), dy.cols * inp);
    for r in 0..x.rows {
        let xr = x.row(r);
        for (o, &g) in dy.row(r).iter().enumerate() {
            if g != 0.0 {
                axpy(g, xr, &mut acc[o * inp..(o + 1) * inp]);
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(z: &Mat) -> Mat {
    Mat::from_vec(z.rows, z.cols, z.data.iter().map(|&v| v * sigmoid(v)).collect())
}

pub fn silu_backward(z: &Mat, dy: &Mat) -> Mat {
    let data = z
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect();
    Mat::from_vec(z.rows, z.cols, data)
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization with learned gain and bias.
pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, LayerNormCache) {
    let d = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let hr = xhat.row_mut(r);
        for (h, v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * is;
        }
        let hr = xhat.row(r);
        for (c, yv) in y.row_mut(r).iter_mut().enumerate() {
            *yv = hr[c] * gain[c] + bias[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(cache: &LayerNormCache, gain: &[f64], dy: &Mat, dgain: Option<&mut [f64]>, dbias: Option<&mut [f64]>) -> Mat {
    let rows = dy.rows;
    let cols = dy.cols;
    let d = cols as f64;
    let mut dx = Mat::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            dxhat[c] = dyr[c] * gain[c];
        }
        let sum_dxhat: f64 = dxhat.iter().sum();
        let sum_dxhat_xhat = dot(&dxhat, xh);
        let is = cache.inv_std[r];
        for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
            *v = is / d * (d * dxhat[c] - sum_dxhat - xh[c] * sum_dxhat_xhat);
        }
    }
    if let Some(dg) = dgain {
        for r in 0..rows {
            for ((g, y), h) in dg.iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                *g += y * h;
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for (g, y) in db.iter_mut().zip(dy.row(r)) {
                *g += *y;
            }
        }
    }
    dx
}

/// Multi-head scaled dot-product attention of `q` (image tokens) over `k`/`v`
/// (condition tokens). Returns the concatenated head outputs and one
/// row-stochastic probability matrix per head (rows = queries, cols = keys).
pub fn cross_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let n = q.rows;
    let l = k.rows;
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Mat::zeros(n, l);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let pr = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, s) in pr.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                max = max.max(*s);
            }
            let mut z = 0.0;
            for s in pr.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for s in pr.iter_mut() {
                *s /= z;
            }
            let orow = &mut out.row_mut(i)[cols.clone()];
            for j in 0..l {
                axpy(p.at(i, j), &v.row(j)[cols.clone()], orow);
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Backward of [`cross_attention`]. Returns `(dq, dk, dv)`.
pub fn cross_attention_backward(q: &Mat, k: &Mat, v: &Mat, probs: &[Mat], dout: &Mat) -> (Mat, Mat, Mat) {
    let heads = probs.len();
    let n = q.rows;
    let l = k.rows;
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(l, d);
    let mut dv = Mat::zeros(l, d);
    let mut dp = vec![0.0; l];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let doi = &dout.row(i)[cols.clone()];
            let pi = p.row(i);
            for j in 0..l {
                dp[j] = dot(doi, &v.row(j)[cols.clone()]);
                axpy(pi[j], doi, &mut dv.row_mut(j)[cols.clone()]);
            }
            let inner: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qi = q.row(i)[cols.clone()].to_vec();
            for j in 0..l {
                let ds = pi[j] * (dp[j] - inner) * scale;
                if ds != 0.0 {
                    axpy(ds, &k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                    axpy(ds, &qi, &mut dk.row_mut(j)[cols.clone()]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Softmax cross-entropy for one row of logits. Returns `(loss, dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[target] / z).ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input_outer_product() {
        // y = W x, L = sum(y)  =>  dL/dW[o][i] = x[i] for every o
        let x = Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let w = vec![0.3; 6];
        let dy = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        let mut dw = vec![0.0; 6];
        linear_backward(&x, &w, &dy, Some(&mut dw), None);
        assert_eq!(dw, vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn linear_is_additive_in_input() {
        let w: Vec<f64> = (0..6).map(|v| v as f64 * 0.1 - 0.2).collect();
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let b = Mat::from_vec(2, 3, vec![0.5, -2.0, 1.0, 2.0, 2.0, -4.0]);
        let mut ab = a.clone();
        ab.add_assign(&b);
        let mut sum = linear(&a, &w, None, 2);
        sum.add_assign(&linear(&b, &w, None, 2));
        let joint = linear(&ab, &w, None, 2);
        for (x, y) in sum.data.iter().zip(&joint.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let q = Mat::from_vec(2, 4, vec![0.1, 2.0, -1.0, 0.3, 5.0, -3.0, 0.0, 1.0]);
        let k = Mat::from_vec(3, 4, (0..12).map(|v| (v as f64 * 0.7).sin()).collect());
        let v = Mat::from_vec(3, 4, (0..12).map(|v| v as f64).collect());
        let (_, probs) = cross_attention(&q, &k, &v, 2);
        for p in &probs {
            for r in 0..p.rows {
                let s: f64 = p.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&[1.0, 2.0, 0.5, -1.0], 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }
}
