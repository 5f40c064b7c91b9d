//! Independent verification oracles.
//!
//! Everything here deliberately avoids the implementation paths it is used to
//! check: gradients come from central finite differences rather than the tape,
//! ODE responses from a separate fine-step integrator, least-squares fits from
//! a plain Gauss-elimination solver, metrics from naive loops. The `oracle-tests`
//! CLI subcommand and the test suites both drive these.

use crate::tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to `params[which]`.
pub fn finite_difference(
    params: &[Tensor],
    which: usize,
    step: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<f64> {
    let mut work: Vec<Tensor> = params.to_vec();
    let n = params[which].len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let up = f(&work);
        work[which].data_mut()[i] = orig - step;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Central finite-difference gradient of a scalar function on a flat vector.
pub fn finite_difference_vec(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = f(&work);
        work[i] = orig - step;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Max relative error between an analytic gradient and its finite-difference
/// counterpart, with an absolute floor to avoid 0/0 on dead entries.
pub fn max_rel_error(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Fine-step RK4 integration of the damped second-order system
/// `y'' + alpha y' + (alpha^2/4) y = forcing(t)` from rest, returning y(t_end).
///
/// Used as the independent reference for the trajectory basis construction
/// (which integrates the same dynamics at a coarser step).
pub fn damped_response(alpha: f64, forcing: impl Fn(f64) -> f64, t_end: f64, steps: usize) -> f64 {
    let h = t_end / steps as f64;
    let mut y = 0.0;
    let mut v = 0.0;
    let accel = |t: f64, y: f64, v: f64| forcing(t) - alpha * v - 0.25 * alpha * alpha * y;
    for i in 0..steps {
        let t = i as f64 * h;
        let (k1y, k1v) = (v, accel(t, y, v));
        let (k2y, k2v) = (v + 0.5 * h * k1v, accel(t + 0.5 * h, y + 0.5 * h * k1y, v + 0.5 * h * k1v));
        let (k3y, k3v) = (v + 0.5 * h * k2v, accel(t + 0.5 * h, y + 0.5 * h * k2y, v + 0.5 * h * k2v));
        let (k4y, k4v) = (v + h * k3v, accel(t + h, y + h * k3y, v + h * k3v));
        y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    }
    y
}

/// Solves a dense symmetric positive-definite-ish system `A x = b` by Gaussian
/// elimination with partial pivoting. Small systems only.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    Some(x)
}

/// Least-squares fit `argmin_w ||design w - target||^2` via normal equations.
pub fn normal_equations_fit(design: &[Vec<f64>], target: &[f64]) -> Option<Vec<f64>> {
    let rows = design.len();
    let cols = design[0].len();
    assert_eq!(rows, target.len());
    let mut ata = vec![vec![0.0; cols]; cols];
    let mut atb = vec![0.0; cols];
    for r in 0..rows {
        for i in 0..cols {
            atb[i] += design[r][i] * target[r];
            for j in 0..cols {
                ata[i][j] += design[r][i] * design[r][j];
            }
        }
    }
    solve_dense(&ata, &atb)
}

/// Naive triple-loop rollout MSE over `[T, N, D]` data restricted to the
/// first `n_def` nodes.
pub fn naive_rollout_mse(pred: &Tensor, truth: &Tensor, n_def: usize) -> f64 {
    let shape = pred.shape();
    assert_eq!(shape, truth.shape());
    let (t_len, n, d) = (shape[0], shape[1], shape[2]);
    let mut acc = 0.0;
    let mut count = 0usize;
    for t in 0..t_len {
        for node in 0..n_def.min(n) {
            for dim in 0..d {
                let i = (t * n + node) * d + dim;
                let e = pred.data()[i] - truth.data()[i];
                acc += e * e;
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Naive last-step MSE over `[T, N, D]` data restricted to deformable nodes.
pub fn naive_last_step_mse(pred: &Tensor, truth: &Tensor, n_def: usize) -> f64 {
    let shape = pred.shape();
    assert_eq!(shape, truth.shape());
    let (t_len, n, d) = (shape[0], shape[1], shape[2]);
    let t = t_len - 1;
    let mut acc = 0.0;
    let mut count = 0usize;
    for node in 0..n_def.min(n) {
        for dim in 0..d {
            let i = (t * n + node) * d + dim;
            let e = pred.data()[i] - truth.data()[i];
            acc += e * e;
            count += 1;
        }
    }
    acc / count as f64
}

/// Composite Simpson quadrature on a uniform grid (n intervals, n even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Conjugate 1-D linear-Gaussian toy: prior `z ~ N(m0, s0^2)`, observations
/// `y_i ~ N(a_i z + b_i, sigma_i^2)`. Returns the exact log marginal
/// likelihood and the posterior `(mean, std)` via sequential conditioning.
pub struct ConjugateToy {
    pub m0: f64,
    pub s0: f64,
    pub coeffs: Vec<(f64, f64, f64)>, // (a_i, b_i, sigma_i)
    pub obs: Vec<f64>,
}

impl ConjugateToy {
    pub fn log_marginal(&self) -> f64 {
        let (mut m, mut var) = (self.m0, self.s0 * self.s0);
        let mut logz = 0.0;
        for ((a, b, s), y) in self.coeffs.iter().zip(&self.obs) {
            let pred_mean = a * m + b;
            let pred_var = a * a * var + s * s;
            logz += gaussian_logpdf(*y, pred_mean, pred_var.sqrt());
            // posterior update
            let k = a * var / pred_var;
            m += k * (y - pred_mean);
            var -= k * a * var;
        }
        logz
    }

    pub fn posterior(&self) -> (f64, f64) {
        let (mut m, mut var) = (self.m0, self.s0 * self.s0);
        for ((a, b, s), y) in self.coeffs.iter().zip(&self.obs) {
            let pred_mean = a * m + b;
            let pred_var = a * a * var + s * s;
            let k = a * var / pred_var;
            m += k * (y - pred_mean);
            var -= k * a * var;
        }
        (m, var.sqrt())
    }

    pub fn log_unnormalized(&self, z: f64) -> f64 {
        let mut v = gaussian_logpdf(z, self.m0, self.s0);
        for ((a, b, s), y) in self.coeffs.iter().zip(&self.obs) {
            v += gaussian_logpdf(*y, a * z + b, *s);
        }
        v
    }
}

pub fn gaussian_logpdf(x: f64, mean: f64, std: f64) -> f64 {
    let d = (x - mean) / std;
    -0.5 * d * d - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Plain two-means clustering of scalars; returns (centers, assignment counts,
/// intra-cluster spread, inter-center distance).
pub fn two_means(values: &[f64], iters: usize) -> (f64, f64, usize, usize, f64, f64) {
    let mut lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..iters {
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for &v in values {
            if (v - lo).abs() <= (v - hi).abs() {
                s0 += v;
                n0 += 1;
            } else {
                s1 += v;
                n1 += 1;
            }
        }
        if n0 > 0 {
            lo = s0 / n0 as f64;
        }
        if n1 > 0 {
            hi = s1 / n1 as f64;
        }
    }
    let (mut n0, mut n1) = (0usize, 0usize);
    let mut spread: f64 = 0.0;
    for &v in values {
        if (v - lo).abs() <= (v - hi).abs() {
            n0 += 1;
            spread = spread.max((v - lo).abs());
        } else {
            n1 += 1;
            spread = spread.max((v - hi).abs());
        }
    }
    (lo, hi, n0, n1, spread, (hi - lo).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_polynomial_exactly() {
        // Simpson is exact for cubics.
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 8);
        let exact = 2.0f64.powi(4) / 4.0 - 2.0 * 2.0 + 2.0;
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn damped_response_steady_state() {
        // Constant unit forcing: steady state is 4 / alpha^2.
        let alpha = 25.0;
        let y = damped_response(alpha, |_| 1.0, 3.0, 30_000);
        assert!((y - 4.0 / (alpha * alpha)).abs() < 1e-9, "y = {y}");
    }

    #[test]
    fn conjugate_toy_matches_direct_quadrature() {
        let toy = ConjugateToy {
            m0: 0.3,
            s0: 1.2,
            coeffs: vec![(1.5, -0.2, 0.7), (0.8, 0.1, 0.5)],
            obs: vec![0.9, 0.4],
        };
        let logz = toy.log_marginal();
        let quad = simpson(|z| toy.log_unnormalized(z).exp(), -12.0, 12.0, 4000).ln();
        assert!((logz - quad).abs() < 1e-8, "{logz} vs {quad}");
    }

    #[test]
    fn normal_equations_recover_polynomial() {
        let design: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let x = i as f64 / 19.0;
                vec![1.0, x, x * x]
            })
            .collect();
        let target: Vec<f64> = design.iter().map(|r| 2.0 - r[1] + 3.0 * r[2]).collect();
        let w = normal_equations_fit(&design, &target).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-9 && (w[1] + 1.0).abs() < 1e-9 && (w[2] - 3.0).abs() < 1e-9);
    }
}
