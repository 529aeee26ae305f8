//! Row-wise kernels with hand-written backward passes.

use super::real::Real;

pub const LN_EPS: f64 = 1e-12;

/// Per-row LayerNorm cache.
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// `y = gamma · (x - mean) / sqrt(var + eps) + beta` over rows of width `n`.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], y: &mut [T], n: usize) -> NormCache<T> {
    let rows = x.len() / n;
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let inv_n = T::from_f64(1.0 / n as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            y[r * n + j] = gamma[j] * h + beta[j];
        }
    }
    NormCache { xhat, rstd }
}

/// Accumulates parameter gradients and writes `dx` (overwriting).
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &NormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
    n: usize,
) {
    let inv_n = T::from_f64(1.0 / n as f64);
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * n..(r + 1) * n];
        let xh = &cache.xhat[r * n..(r + 1) * n];
        let mut mean_d = T::ZERO;
        let mut mean_dx = T::ZERO;
        for j in 0..n {
            let d = dyr[j] * gamma[j];
            mean_d += d;
            mean_dx += d * xh[j];
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        for j in 0..n {
            let d = dyr[j] * gamma[j];
            dx[r * n + j] = rs * (d - mean_d - xh[j] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

/// In-place softmax of one row. Entries equal to `-inf` get probability
/// exactly 0; a row with no finite entry becomes all zeros.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let mut max = T::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(v);
    }
    if max == T::NEG_INFINITY {
        row.fill(T::ZERO);
        return;
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = if *v == T::NEG_INFINITY { T::ZERO } else { (*v - max).exp() };
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `dS = P ⊙ (dP - rowsum(P ⊙ dP))`, written over `dp`.
pub fn softmax_row_backward<T: Real>(p: &[T], dp: &mut [T]) {
    let dot: T = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
    for (d, &pi) in dp.iter_mut().zip(p) {
        *d = pi * (*d - dot);
    }
}

/// Log-sum-exp of a row and the cross-entropy `lse - row[target]`.
pub fn cross_entropy<T: Real>(row: &[T], target: usize) -> (T, T) {
    let mut max = T::NEG_INFINITY;
    for &v in row {
        max = max.max(v);
    }
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    (lse, lse - row[target])
}

/// Adds `scale · (softmax(row) - onehot(target))` into `grad`.
pub fn cross_entropy_grad<T: Real>(row: &[T], lse: T, target: usize, scale: T, grad: &mut [T]) {
    for (j, (g, &v)) in grad.iter_mut().zip(row).enumerate() {
        let p = (v - lse).exp();
        *g = scale * if j == target { p - T::ONE } else { p };
    }
}

pub fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn col_sum_acc<T: Real>(x: &[T], out: &mut [T]) {
    let n = out.len();
    for row in x.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = [1.0f64, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 4.0];
        let mut y = [0.0; 8];
        layer_norm(&x, &[1.0; 4], &[0.0; 4], &mut y, 4);
        for row in y.chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_5).abs() < 1e-12);
        let h = 1e-6;
        for x in [-3.0f64, -0.5, 0.2, 2.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_ignores_masked_entries() {
        let mut r = [1.0f64, f64::NEG_INFINITY, 1.0];
        softmax_row(&mut r);
        assert_eq!(r, [0.5, 0.0, 0.5]);
        let mut dead = [f64::NEG_INFINITY; 2];
        softmax_row(&mut dead);
        assert_eq!(dead, [0.0, 0.0]);
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let (_, l) = cross_entropy(&[0.3f64; 7], 2);
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let (_, l) = cross_entropy(&[0.0f64, 50.0, 0.0], 1);
        assert!(l < 1e-20);
    }
}
