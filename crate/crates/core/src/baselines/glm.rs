//! Logistic-link generalised linear model fitted by damped Newton
//! iterations on the ridge-penalised, sample-weighted log-likelihood.
//! Two classes use one model; more classes use one-vs-rest models with an
//! argmax decision.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::BaselineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlmConfig {
    pub ridge: f64,
    /// Stop when the gradient norm of the mean objective falls below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for GlmConfig {
    fn default() -> Self {
        GlmConfig {
            ridge: 1e-4,
            tolerance: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModel {
    pub n_classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// One coefficient vector per binary problem; intercept last.
    pub coefs: Vec<Vec<f64>>,
    pub converged: bool,
    /// Largest final gradient norm over the binary problems.
    pub grad_norm: f64,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Fit {
    beta: DVector<f64>,
    converged: bool,
    grad_norm: f64,
    iterations: usize,
}

fn fit_binary(x: &DMatrix<f64>, y: &[f64], w: &[f64], cfg: &GlmConfig) -> Fit {
    let (n, d) = x.shape();
    let wsum: f64 = w.iter().sum();
    let objective = |beta: &DVector<f64>| {
        let z = x * beta;
        let nll: f64 = (0..n).map(|i| w[i] * (softplus(z[i]) - y[i] * z[i])).sum::<f64>() / wsum;
        nll + 0.5 * cfg.ridge * beta.norm_squared()
    };
    let mut beta = DVector::zeros(d);
    let mut f = objective(&beta);
    let mut grad_norm = f64::INFINITY;
    for it in 0..cfg.max_iter {
        let z = x * &beta;
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let r = DVector::from_iterator(n, (0..n).map(|i| w[i] * (p[i] - y[i]) / wsum));
        let grad = x.transpose() * r + cfg.ridge * &beta;
        grad_norm = grad.norm();
        if grad_norm < cfg.tolerance {
            return Fit {
                beta,
                converged: true,
                grad_norm,
                iterations: it,
            };
        }
        let mut xw = x.clone();
        for i in 0..n {
            let s = w[i] * p[i] * (1.0 - p[i]) / wsum;
            xw.row_mut(i).scale_mut(s);
        }
        let mut hess = x.transpose() * xw;
        for j in 0..d {
            hess[(j, j)] += cfg.ridge;
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        loop {
            let cand = &beta - t * &step;
            let fc = objective(&cand);
            if fc <= f || t < 1e-10 {
                beta = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
    }
    Fit {
        beta,
        converged: false,
        grad_norm,
        iterations: cfg.max_iter,
    }
}

impl GlmModel {
    fn design(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(rows.len(), d + 1, |i, j| {
            if j == d {
                1.0
            } else {
                (rows[i][j] - self.mean[j]) / self.scale[j]
            }
        })
    }

    /// One score per binary problem for each row (logit of class 1 when
    /// there are two classes).
    pub fn scores(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let x = self.design(rows);
        let cols: Vec<DVector<f64>> = self.coefs.iter().map(|c| &x * DVector::from_column_slice(c)).collect();
        (0..rows.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<usize> {
        self.scores(rows)
            .into_iter()
            .map(|s| {
                if self.n_classes == 2 {
                    usize::from(s[0] > 0.0)
                } else {
                    (0..s.len()).fold(0, |b, c| if s[c] > s[b] { c } else { b })
                }
            })
            .collect()
    }
}

/// Fits on standardised features with per-sample weights `class_weights[y]`.
pub fn train_glm(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    class_weights: Option<&[f64]>,
    cfg: &GlmConfig,
) -> Result<GlmModel, BaselineError> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(BaselineError::Shape("features and labels must be non-empty and aligned".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(BaselineError::Shape("feature rows must be finite and equally long".into()));
    }
    if labels.iter().any(|&y| y >= n_classes) {
        return Err(BaselineError::Shape("label out of range".into()));
    }
    let present = (0..n_classes).filter(|c| labels.contains(c)).count();
    if n_classes < 2 || present < 2 {
        return Err(BaselineError::SingleClass);
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = GlmModel {
        n_classes,
        mean,
        scale,
        coefs: Vec::new(),
        converged: true,
        grad_norm: 0.0,
        iterations: 0,
    };
    let x = model.design(rows);
    let w: Vec<f64> = labels.iter().map(|&y| class_weights.map_or(1.0, |cw| cw[y])).collect();
    let targets: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
    for c in targets {
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == c))).collect();
        let fit = fit_binary(&x, &y, &w, cfg);
        if !fit.converged {
            log::warn!("GLM for class {c} stopped at gradient norm {:.3e}", fit.grad_norm);
        }
        model.converged &= fit.converged;
        model.grad_norm = model.grad_norm.max(fit.grad_norm);
        model.iterations = model.iterations.max(fit.iterations);
        model.coefs.push(fit.beta.iter().copied().collect());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::stream(seed, &[]);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let a: f64 = r.gen_range(-1.0..1.0);
            let b: f64 = r.gen_range(-1.0..1.0);
            if (a + 2.0 * b).abs() < 0.05 {
                continue;
            }
            rows.push(vec![a, b, r.gen_range(-1.0..1.0)]);
            labels.push(usize::from(a + 2.0 * b > 0.0));
        }
        (rows, labels)
    }

    #[test]
    fn separable_data_is_fitted() {
        let (rows, labels) = toy(400, 1);
        let m = train_glm(&rows, &labels, 2, None, &GlmConfig::default()).unwrap();
        let acc = m.predict(&rows).iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / rows.len() as f64;
        assert!(acc > 0.99, "{acc}");
        assert!(m.converged, "{}", m.grad_norm);
    }

    #[test]
    fn duplicated_column_is_handled_by_ridge() {
        let (mut rows, labels) = toy(300, 2);
        for r in &mut rows {
            r.push(r[0]);
        }
        let m = train_glm(&rows, &labels, 2, Some(&[1.0, 2.0]), &GlmConfig::default()).unwrap();
        assert!(m.coefs[0].iter().all(|c| c.is_finite()));
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train_glm(&rows, &[1, 1], 2, None, &GlmConfig::default()),
            Err(BaselineError::SingleClass)
        ));
    }

    #[test]
    fn one_vs_rest_separates_three_blobs() {
        let mut r = rng::stream(3, &[]);
        let centres = [(-3.0, 0.0), (3.0, 0.0), (0.0, 3.0)];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            rows.push(vec![centres[c].0 + r.gen_range(-1.0..1.0), centres[c].1 + r.gen_range(-1.0..1.0)]);
            labels.push(c);
        }
        let m = train_glm(&rows, &labels, 3, None, &GlmConfig::default()).unwrap();
        let acc = m.predict(&rows).iter().zip(&labels).filter(|(a, b)| a == b).count();
        assert!(acc >= 297, "{acc}");
    }
}
