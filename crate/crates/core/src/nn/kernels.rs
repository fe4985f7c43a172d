//! Row-local dense kernels.
//!
//! Every output row is computed from its own input row with a fixed summation
//! order, so a row's value never depends on how many other rows are present.
//! Causality and prefix/score consistency are bitwise because of this.

use super::scalar::Scalar;

#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    let split = n - n % 8;
    let mut acc = [T::zero(); 8];
    for (xc, yc) in x[..split].chunks_exact(8).zip(y[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += xc[l] * yc[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in split..n {
        s += x[i] * y[i];
    }
    s
}

fn all_zero<T: Scalar>(x: &[T]) -> bool {
    x.iter().all(|v| v.is_zero())
}

/// `y[r] = b + x[r] · W` with `W` stored `[din, dout]` row-major.
pub fn linear_fwd<T: Scalar>(x: &[T], din: usize, w: &[T], b: &[T], dout: usize, y: &mut [T]) {
    for (xr, yr) in x.chunks_exact(din).zip(y.chunks_exact_mut(dout)) {
        yr.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate() {
            axpy(xi, &w[i * dout..(i + 1) * dout], yr);
        }
    }
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and `dx += dy · Wᵀ`.
/// Rows whose upstream gradient is exactly zero are skipped.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    for (r, (xr, dyr)) in x.chunks_exact(din).zip(dy.chunks_exact(dout)).enumerate() {
        if all_zero(dyr) {
            continue;
        }
        axpy(T::one(), dyr, db);
        for (i, &xi) in xr.iter().enumerate() {
            axpy(xi, dyr, &mut dw[i * dout..(i + 1) * dout]);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * din..(r + 1) * din];
            for (i, d) in dxr.iter_mut().enumerate() {
                *d += dot(dyr, &w[i * dout..(i + 1) * dout]);
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

pub fn layernorm_fwd<T: Scalar>(
    x: &[T],
    d: usize,
    g: &[T],
    b: &[T],
    xhat: &mut [T],
    rstd: &mut [T],
    y: &mut [T],
) {
    let inv_d = T::one() / T::of(d as f64);
    let eps = T::of(LN_EPS);
    for (r, xr) in x.chunks_exact(d).enumerate() {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (xr[i] - mean) * rs;
            yr[i] = xh[i] * g[i] + b[i];
        }
    }
}

/// Accumulates parameter gradients and `dx += ∂L/∂x`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd<T: Scalar>(
    dy: &[T],
    d: usize,
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, dyr) in dy.chunks_exact(d).enumerate() {
        if all_zero(dyr) {
            continue;
        }
        let xh = &xhat[r * d..(r + 1) * d];
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            sum += dxhat[i];
            sum_x += dxhat[i] * xh[i];
        }
        let rs = rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rs * (dxhat[i] - inv_d * sum - xh[i] * inv_d * sum_x);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * u * u)
}

/// Natural-log softmax of one row.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let x: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let y: Vec<f64> = (0..19).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let row = log_softmax(&[1.0f64, -2.0, 0.5, 30.0]);
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
