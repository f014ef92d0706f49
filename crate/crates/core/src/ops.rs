//! Dense building blocks with hand-written backward passes.
//!
//! Weight matrices follow the `[out × in]` layout, so a linear map is
//! `y = x·Wᵀ + b` over row-major batches.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;

pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Accumulates `dW += dyᵀ·x`, `db += Σ dy` and returns `dx = dy·W`.
pub fn linear_backward(
    dy: ArrayView2<f64>,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dw: &mut Array2<f64>,
    db: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, dw);
    if let Some(db) = db {
        *db += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w)
}

/// Row-wise layer normalization cache.
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let y = &xhat * &gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LayerNormCache,
    gamma: ArrayView1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.inv_std)
        .for_each(|mut dx, g, xh, &s| {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            Zip::from(&mut dx)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = s * (gi - mean_g - xi * mean_gx));
        });
    dx
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    out
}

/// `dx = p ⊙ (dp − ⟨dp, p⟩)` per row.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(p.raw_dim());
    Zip::from(dx.rows_mut())
        .and(p.rows())
        .and(dp.rows())
        .for_each(|mut dx, p, dp| {
            let inner = p.dot(&dp);
            Zip::from(&mut dx)
                .and(&p)
                .and(&dp)
                .for_each(|o, &pi, &gi| *o = pi * (gi - inner));
        });
    dx
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values
        .into_iter()
        .map(|v| (v - max).exp())
        .sum::<f64>()
        .ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Normalizes each row to unit length. Zero rows stay zero.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    for (mut row, n) in out.rows_mut().into_iter().zip(norms.iter_mut()) {
        *n = l2_norm(row.view());
        if *n > 0.0 {
            row /= *n;
        }
    }
    (out, norms)
}

/// Backward of `u = x/‖x‖` given `u` and `‖x‖`: `dx = (du − u⟨u,du⟩)/‖x‖`.
pub fn l2_normalize_backward(u: ArrayView1<f64>, norm: f64, du: ArrayView1<f64>) -> Array1<f64> {
    if norm == 0.0 {
        return Array1::zeros(u.len());
    }
    let inner = u.dot(&du);
    (&du - &(&u * inner)) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(x.view(), g.view(), b.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.dot(&row) / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = array![[0.3, -1.2, 2.0], [1.5, 0.1, -0.7]];
        let g = array![1.1, 0.9, -0.5];
        let b = array![0.2, 0.0, -0.1];
        let dy = array![[0.5, -0.3, 1.0], [0.2, 0.4, -0.6]];
        let (_, cache) = layer_norm(x.view(), g.view(), b.view());
        let (mut dg, mut db) = (Array1::zeros(3), Array1::zeros(3));
        let dx = layer_norm_backward(dy.view(), &cache, g.view(), &mut dg, &mut db);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fp = (&layer_norm(xp.view(), g.view(), b.view()).0 * &dy).sum();
                let fm = (&layer_norm(xm.view(), g.view(), b.view()).0 * &dy).sum();
                assert!(((fp - fm) / (2.0 * h) - dx[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp([1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn softplus_limits() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
    }
}
