//! Row-wise building blocks with hand-written backward passes.

use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over rows of width `d`; stores normalized inputs and
/// reciprocal standard deviations for the backward pass.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    g: &[T],
    b: &[T],
    y: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let eps = T::of(LN_EPS);
    let inv_d = T::one() / T::of(d as f64);
    for (r, ((xr, yr), hr)) in x
        .chunks_exact(d)
        .zip(y.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            hr[i] = h;
            yr[i] = h * g[i] + b[i];
        }
    }
}

/// Accumulates `dg`, `db` and writes (or adds, if `accumulate`) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    d: usize,
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
    accumulate: bool,
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, ((dyr, hr), dxr)) in dy
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut sum = T::zero();
        let mut sum_h = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * hr[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            sum += dxhat[i];
            sum_h += dxhat[i] * hr[i];
        }
        let mean = sum * inv_d;
        let mean_h = sum_h * inv_d;
        for i in 0..d {
            let v = rstd[r] * (dxhat[i] - mean - hr[i] * mean_h);
            if accumulate {
                dxr[i] += v;
            } else {
                dxr[i] = v;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// In-place softmax of one row.
pub fn softmax<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Adds `bias` to every row of width `bias.len()`.
pub fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `dy` accumulated into `db`.
pub fn bias_grad<T: Scalar>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks_exact(db.len()) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}
