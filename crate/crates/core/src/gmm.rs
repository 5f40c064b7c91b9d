//! Full-covariance Gaussian mixtures over the latent task descriptor.
//!
//! Covariances are stored through their Cholesky factors, which keeps them
//! symmetric positive-definite by construction; natural-parameter (precision)
//! form conversions back this up for the trust-region updates.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stats::LN_2PI;

// ---- small dense symmetric linear algebra (row-major, n x n) ----

/// Cholesky factorization A = L L^T; None when A is not positive definite.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves L x = b with L lower-triangular.
pub(crate) fn solve_lower(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solves L^T x = b with L lower-triangular.
pub(crate) fn solve_lower_t(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solves A x = b given chol(A) = L.
pub(crate) fn chol_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    solve_lower_t(l, &solve_lower(l, b, n), n)
}

/// Inverse of A given chol(A) = L.
pub(crate) fn chol_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for col in 0..n {
        e[col] = 1.0;
        let x = chol_solve(l, &e, n);
        e[col] = 0.0;
        for row in 0..n {
            inv[row * n + col] = x[row];
        }
    }
    // symmetrize against rounding
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = m;
            inv[j * n + i] = m;
        }
    }
    inv
}

fn logdet_from_chol(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

// ---- Gaussian component ----

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    /// Lower-triangular Cholesky factor of the covariance (row-major).
    pub chol: Vec<f64>,
}

impl Gaussian {
    pub fn standard(dim: usize) -> Self {
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            chol[i * dim + i] = 1.0;
        }
        Gaussian {
            mean: vec![0.0; dim],
            chol,
        }
    }

    pub fn new(mean: Vec<f64>, covariance: &[f64]) -> Result<Self> {
        let n = mean.len();
        let chol = cholesky(covariance, n)
            .ok_or_else(|| Error::contract("covariance is not positive definite"))?;
        Ok(Gaussian { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Vec<f64> {
        let n = self.dim();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..=i.min(j) {
                    s += self.chol[i * n + k] * self.chol[j * n + k];
                }
                cov[i * n + j] = s;
            }
        }
        cov
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let n = self.dim();
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let w = solve_lower(&self.chol, &diff, n);
        let quad: f64 = w.iter().map(|v| v * v).sum();
        -0.5 * quad - 0.5 * logdet_from_chol(&self.chol, n) - 0.5 * n as f64 * LN_2PI
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.dim();
        let xi: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut z = self.mean.clone();
        for i in 0..n {
            for k in 0..=i {
                z[i] += self.chol[i * n + k] * xi[k];
            }
        }
        z
    }

    /// Natural parameters: precision `Lambda = Sigma^{-1}` and `eta = Lambda mu`.
    pub fn natural(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        // Sigma = L L^T  =>  Lambda = L^{-T} L^{-1}
        let mut lambda = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for col in 0..n {
            e[col] = 1.0;
            let x = chol_solve(&self.chol, &e, n);
            e[col] = 0.0;
            for row in 0..n {
                lambda[row * n + col] = x[row];
            }
        }
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (lambda[i * n + j] + lambda[j * n + i]);
                lambda[i * n + j] = m;
                lambda[j * n + i] = m;
            }
        }
        let eta = (0..n)
            .map(|i| (0..n).map(|j| lambda[i * n + j] * self.mean[j]).sum())
            .collect();
        (lambda, eta)
    }

    /// Builds a component from natural parameters; fails when the precision
    /// is not positive definite.
    pub fn from_natural(lambda: &[f64], eta: &[f64]) -> Option<Gaussian> {
        let n = eta.len();
        let lchol = cholesky(lambda, n)?;
        let mean = chol_solve(&lchol, eta, n);
        let sigma = chol_inverse(&lchol, n);
        let chol = cholesky(&sigma, n)?;
        if !mean.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some(Gaussian { mean, chol })
    }

    /// KL(self || other), closed form.
    pub fn kl(&self, other: &Gaussian) -> f64 {
        let n = self.dim();
        let (lambda1, _) = other.natural();
        let sigma0 = self.covariance();
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                trace += lambda1[i * n + j] * sigma0[j * n + i];
            }
        }
        let diff: Vec<f64> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(a, b)| a - b)
            .collect();
        let w = solve_lower(&other.chol, &diff, n);
        let quad: f64 = w.iter().map(|v| v * v).sum();
        let logdet0 = logdet_from_chol(&self.chol, n);
        let logdet1 = logdet_from_chol(&other.chol, n);
        0.5 * (trace + quad - n as f64 + logdet1 - logdet0)
    }
}

// ---- mixture ----

#[derive(Debug, Clone, PartialEq)]
pub struct GmmPosterior {
    pub log_weights: Vec<f64>,
    pub comps: Vec<Gaussian>,
}

pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl GmmPosterior {
    pub fn new(weights: &[f64], comps: Vec<Gaussian>) -> Result<Self> {
        if weights.len() != comps.len() || comps.is_empty() {
            return Err(Error::contract("weights and components must align and be non-empty"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::contract(format!(
                "weights must lie on the simplex (sum {total})"
            )));
        }
        let log_weights = weights.iter().map(|w| w.max(1e-300).ln()).collect();
        let q = GmmPosterior { log_weights, comps };
        q.validate()?;
        Ok(q)
    }

    /// Single-component mixture.
    pub fn single(comp: Gaussian) -> Self {
        GmmPosterior {
            log_weights: vec![0.0],
            comps: vec![comp],
        }
    }

    /// Initialization for unseen tasks: means drawn from the standard-normal
    /// prior, identity covariances, uniform weights.
    pub fn prior_init(k: usize, dim: usize, rng: &mut Rng) -> Self {
        let comps = (0..k)
            .map(|_| {
                let mut g = Gaussian::standard(dim);
                g.mean = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                g
            })
            .collect();
        GmmPosterior {
            log_weights: vec![-(k as f64).ln(); k],
            comps,
        }
    }

    pub fn k(&self) -> usize {
        self.comps.len()
    }

    pub fn dim(&self) -> usize {
        self.comps[0].dim()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.weights().iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("weight simplex violated: sum {total}")));
        }
        for c in &self.comps {
            let n = c.dim();
            for i in 0..n {
                if c.chol[i * n + i] <= 0.0 {
                    return Err(Error::contract("Cholesky diagonal must be positive"));
                }
            }
        }
        Ok(())
    }

    /// `log sum_k w_k N(z | mu_k, Sigma_k)` via log-sum-exp.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .comps
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density(z))
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws `n` samples: component by weight, then a Cholesky-transformed
    /// Gaussian draw. Reproducible under the rng seed.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if n < 1 {
            return Err(Error::contract("sample count must be >= 1"));
        }
        let weights = self.weights();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = self.comps.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                acc += w;
                if u <= acc {
                    pick = k;
                    break;
                }
            }
            out.push(self.comps[pick].sample(rng));
        }
        Ok(out)
    }

    /// Trace of the full mixture covariance
    /// `sum_k w_k (tr Sigma_k + |mu_k - mu_bar|^2)`.
    pub fn covariance_trace(&self) -> f64 {
        let dim = self.dim();
        let weights = self.weights();
        let mut mu_bar = vec![0.0; dim];
        for (w, c) in weights.iter().zip(&self.comps) {
            for d in 0..dim {
                mu_bar[d] += w * c.mean[d];
            }
        }
        let mut trace = 0.0;
        for (w, c) in weights.iter().zip(&self.comps) {
            let cov = c.covariance();
            let tr: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
            let sep: f64 = c
                .mean
                .iter()
                .zip(&mu_bar)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            trace += w * (tr + sep);
        }
        trace
    }
}
