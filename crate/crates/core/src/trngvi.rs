//! Trust-region natural-gradient variational inference for GMM posteriors.
//!
//! Each step fits, per component, a local quadratic surrogate of the
//! unnormalized log posterior by least squares on sampled gradients, then
//! moves the component's natural parameters toward the surrogate's — the
//! exponential-family natural-gradient direction — scaling the step back
//! until the per-component Gaussian KL stays within the trust region.
//! Mixture weights follow each component's expected advantage
//! `log p~(z) - log q(z)` under the same KL bound on the categorical
//! distribution. Covariances are updated in precision form and stay positive
//! definite by construction.

use crate::error::{Error, Result};
use crate::gmm::{cholesky, log_sum_exp, Gaussian, GmmPosterior};
use crate::rng::Rng;

/// Value and gradient of the unnormalized log posterior at one latent point.
#[derive(Debug, Clone)]
pub struct OracleEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Callable returning `(log p~(z), d/dz log p~(z))`.
pub trait LogPosteriorOracle: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, z: &[f64]) -> Result<OracleEval>;
}

/// Closure-backed oracle for tests and toy targets.
pub struct FnOracle<F: Fn(&[f64]) -> Result<OracleEval> + Sync> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Result<OracleEval> + Sync> LogPosteriorOracle for FnOracle<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, z: &[f64]) -> Result<OracleEval> {
        (self.f)(z)
    }
}

#[derive(Debug, Clone)]
pub struct TrngviConfig {
    pub samples_per_component: usize,
    pub kl_bound: f64,
    /// Ridge strength of the surrogate fit, centered on the component's
    /// current natural parameters so an exact fit stays exact.
    pub ridge: f64,
}

impl Default for TrngviConfig {
    fn default() -> Self {
        TrngviConfig {
            samples_per_component: 16,
            kl_bound: 0.01,
            ridge: 1e-6,
        }
    }
}

/// Diagnostics for one step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// KL(new_k || old_k) per component on the accepted step.
    pub component_kls: Vec<f64>,
    /// Categorical KL of the weight update.
    pub weight_kl: f64,
    /// True when a singular surrogate fit fell back to the diagonal model.
    pub degraded: bool,
}

impl StepReport {
    pub fn mean_component_kl(&self) -> f64 {
        if self.component_kls.is_empty() {
            0.0
        } else {
            self.component_kls.iter().sum::<f64>() / self.component_kls.len() as f64
        }
    }
}

/// Quadratic surrogate `log p~(z) ~ -(1/2) z^T Lambda z + eta^T z + c` in
/// natural-parameter form.
struct Surrogate {
    lambda: Vec<f64>,
    eta: Vec<f64>,
    degraded: bool,
}

/// Least-squares fit of the surrogate from gradient samples:
/// `g_i ~ eta - Lambda z_i`, ridge-regularized toward the component's current
/// natural parameters. Falls back to per-dimension diagonal fits when the
/// shared normal-equation system is singular.
fn fit_surrogate(
    zs: &[Vec<f64>],
    grads: &[Vec<f64>],
    lambda_old: &[f64],
    eta_old: &[f64],
    ridge: f64,
) -> Surrogate {
    let dim = zs[0].len();
    let s = zs.len();
    let f = dim + 1; // features: [1, -z_1, ..., -z_dim]
    // shared normal matrix
    let mut ata = vec![0.0; f * f];
    for z in zs {
        let mut phi = Vec::with_capacity(f);
        phi.push(1.0);
        phi.extend(z.iter().map(|v| -v));
        for i in 0..f {
            for j in 0..f {
                ata[i * f + j] += phi[i] * phi[j];
            }
        }
    }
    for i in 0..f {
        ata[i * f + i] += ridge;
    }

    if let Some(l) = cholesky(&ata, f) {
        let mut lambda = vec![0.0; dim * dim];
        let mut eta = vec![0.0; dim];
        let mut ok = true;
        for d in 0..dim {
            // rhs = Phi^T g_d + ridge * w_old where w_old = [eta_old_d, Lambda_old row d]
            let mut rhs = vec![0.0; f];
            for (z, g) in zs.iter().zip(grads) {
                rhs[0] += g[d];
                for e in 0..dim {
                    rhs[e + 1] += -z[e] * g[d];
                }
            }
            rhs[0] += ridge * eta_old[d];
            for e in 0..dim {
                rhs[e + 1] += ridge * lambda_old[d * dim + e];
            }
            let w = crate::gmm::chol_solve(&l, &rhs, f);
            if !w.iter().all(|v| v.is_finite()) {
                ok = false;
                break;
            }
            eta[d] = w[0];
            for e in 0..dim {
                lambda[d * dim + e] = w[e + 1];
            }
        }
        if ok {
            // symmetrize
            for i in 0..dim {
                for j in 0..i {
                    let m = 0.5 * (lambda[i * dim + j] + lambda[j * dim + i]);
                    lambda[i * dim + j] = m;
                    lambda[j * dim + i] = m;
                }
            }
            return Surrogate {
                lambda,
                eta,
                degraded: false,
            };
        }
    }

    // degraded fallback: independent per-dimension linear fits g_d ~ a_d - l_d z_d
    let mut lambda = vec![0.0; dim * dim];
    let mut eta = vec![0.0; dim];
    for d in 0..dim {
        let (mut sz, mut sg, mut szz, mut szg) = (0.0, 0.0, 0.0, 0.0);
        for (z, g) in zs.iter().zip(grads) {
            sz += z[d];
            sg += g[d];
            szz += z[d] * z[d];
            szg += z[d] * g[d];
        }
        let n = s as f64;
        let denom = n * szz - sz * sz;
        if denom.abs() > 1e-12 {
            let slope = (n * szg - sz * sg) / denom;
            let l = (-slope).max(0.0);
            lambda[d * dim + d] = l;
            eta[d] = (sg + l * sz) / n;
        } else {
            lambda[d * dim + d] = lambda_old[d * dim + d].max(0.0);
            eta[d] = sg / n;
        }
    }
    Surrogate {
        lambda,
        eta,
        degraded: true,
    }
}

/// Candidate component at interpolation `beta` along the natural-gradient
/// direction; None when the interpolated precision is not positive definite.
fn component_at(
    beta: f64,
    lambda_old: &[f64],
    eta_old: &[f64],
    surrogate: &Surrogate,
) -> Option<Gaussian> {
    let dim = eta_old.len();
    let lambda: Vec<f64> = lambda_old
        .iter()
        .zip(&surrogate.lambda)
        .map(|(o, s)| (1.0 - beta) * o + beta * s)
        .collect();
    let eta: Vec<f64> = eta_old
        .iter()
        .zip(&surrogate.eta)
        .map(|(o, s)| (1.0 - beta) * o + beta * s)
        .collect();
    let _ = dim;
    Gaussian::from_natural(&lambda, &eta)
}

/// Largest step in (0, 1] whose KL to the old component stays within the
/// bound, found by bisection; step 0 reproduces the old component.
fn trust_region_step(
    old: &Gaussian,
    lambda_old: &[f64],
    eta_old: &[f64],
    surrogate: &Surrogate,
    kl_bound: f64,
) -> (Gaussian, f64) {
    let admissible = |beta: f64| -> Option<(Gaussian, f64)> {
        let cand = component_at(beta, lambda_old, eta_old, surrogate)?;
        let kl = cand.kl(old);
        if kl.is_finite() && kl <= kl_bound {
            Some((cand, kl))
        } else {
            None
        }
    };
    if let Some((g, kl)) = admissible(1.0) {
        return (g, kl);
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut best: Option<(Gaussian, f64)> = None;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match admissible(mid) {
            Some(found) => {
                lo = mid;
                best = Some(found);
            }
            None => hi = mid,
        }
    }
    match best {
        Some((g, kl)) => (g, kl),
        None => (old.clone(), 0.0),
    }
}

/// One trust-region natural-gradient step on the full mixture.
pub fn trngvi_step(
    q: &GmmPosterior,
    oracle: &dyn LogPosteriorOracle,
    cfg: &TrngviConfig,
    rng: &mut Rng,
) -> Result<(GmmPosterior, StepReport)> {
    if cfg.kl_bound <= 0.0 {
        return Err(Error::contract("kl_bound must be positive"));
    }
    if cfg.samples_per_component < 2 {
        return Err(Error::contract("need at least 2 samples per component"));
    }
    if oracle.dim() != q.dim() {
        return Err(Error::contract(format!(
            "oracle dim {} != posterior dim {}",
            oracle.dim(),
            q.dim()
        )));
    }

    let k = q.k();
    let mut new_comps = Vec::with_capacity(k);
    let mut component_kls = Vec::with_capacity(k);
    let mut advantages = Vec::with_capacity(k);
    let mut degraded = false;

    for comp in &q.comps {
        let zs: Vec<Vec<f64>> = (0..cfg.samples_per_component)
            .map(|_| comp.sample(rng))
            .collect();
        let mut grads = Vec::with_capacity(zs.len());
        let mut advantage = 0.0;
        for z in &zs {
            let eval = oracle.eval(z)?;
            if !eval.value.is_finite() || !eval.grad.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric("trngvi_step", "non-finite oracle output"));
            }
            advantage += eval.value - q.log_density(z);
            grads.push(eval.grad);
        }
        advantage /= zs.len() as f64;
        advantages.push(advantage);

        let (lambda_old, eta_old) = comp.natural();
        let surrogate = fit_surrogate(&zs, &grads, &lambda_old, &eta_old, cfg.ridge);
        degraded |= surrogate.degraded;
        let (new_comp, kl) = trust_region_step(comp, &lambda_old, &eta_old, &surrogate, cfg.kl_bound);
        new_comps.push(new_comp);
        component_kls.push(kl);
    }

    // weight update: log w_k <- log w_k + beta * advantage_k, KL-bounded
    let mut new_log_weights = q.log_weights.clone();
    let mut weight_kl = 0.0;
    if k > 1 {
        let max_adv = advantages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = advantages.iter().map(|a| a - max_adv).collect();
        let candidate = |beta: f64| -> (Vec<f64>, f64) {
            let raw: Vec<f64> = q
                .log_weights
                .iter()
                .zip(&shifted)
                .map(|(lw, a)| lw + beta * a)
                .collect();
            let norm = log_sum_exp(&raw);
            let lw: Vec<f64> = raw.iter().map(|v| v - norm).collect();
            let kl: f64 = lw
                .iter()
                .zip(&q.log_weights)
                .map(|(n, o)| n.exp() * (n - o))
                .sum();
            (lw, kl)
        };
        let (cand, kl) = candidate(1.0);
        if kl <= cfg.kl_bound {
            new_log_weights = cand;
            weight_kl = kl;
        } else {
            let mut lo = 0.0;
            let mut hi = 1.0;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let (cand, kl) = candidate(mid);
                if kl <= cfg.kl_bound {
                    lo = mid;
                    new_log_weights = cand;
                    weight_kl = kl;
                } else {
                    hi = mid;
                }
            }
        }
        // exact renormalization keeps the simplex within 1e-12
        let norm = log_sum_exp(&new_log_weights);
        for lw in &mut new_log_weights {
            *lw -= norm;
        }
    }

    let new_q = GmmPosterior {
        log_weights: new_log_weights,
        comps: new_comps,
    };
    new_q.validate()?;
    Ok((
        new_q,
        StepReport {
            component_kls,
            weight_kl,
            degraded,
        },
    ))
}

/// Iterates `trngvi_step` from `q0`. Deterministic under the rng seed.
pub fn fit_posterior(
    q0: &GmmPosterior,
    oracle: &dyn LogPosteriorOracle,
    steps: usize,
    cfg: &TrngviConfig,
    rng: &mut Rng,
) -> Result<(GmmPosterior, Vec<StepReport>)> {
    if steps < 1 {
        return Err(Error::contract("fit_posterior requires steps >= 1"));
    }
    let mut q = q0.clone();
    let mut reports = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, report) = trngvi_step(&q, oracle, cfg, rng)?;
        q = next;
        reports.push(report);
    }
    Ok((q, reports))
}

/// Oracle for an explicit Gaussian target (tests, calibration).
pub struct GaussianTargetOracle {
    target: Gaussian,
    lambda: Vec<f64>,
    eta: Vec<f64>,
}

impl GaussianTargetOracle {
    pub fn new(target: Gaussian) -> Self {
        let (lambda, eta) = target.natural();
        GaussianTargetOracle {
            target,
            lambda,
            eta,
        }
    }

    pub fn target(&self) -> &Gaussian {
        &self.target
    }
}

impl LogPosteriorOracle for GaussianTargetOracle {
    fn dim(&self) -> usize {
        self.target.dim()
    }
    fn eval(&self, z: &[f64]) -> Result<OracleEval> {
        let dim = z.len();
        let grad = (0..dim)
            .map(|d| {
                self.eta[d]
                    - (0..dim)
                        .map(|e| self.lambda[d * dim + e] * z[e])
                        .sum::<f64>()
            })
            .collect();
        Ok(OracleEval {
            value: self.target.log_density(z),
            grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::stats::LN_2PI;

    fn step_cfg() -> TrngviConfig {
        TrngviConfig::default()
    }

    #[test]
    fn standard_normal_target_is_a_fixed_point() {
        // oracle == log N(0, I) and q == N(0, I): the surrogate fit is exact
        // (ridge is centered on the current parameters), so the update is a
        // numerical no-op.
        let q = GmmPosterior::single(Gaussian::standard(3));
        let oracle = GaussianTargetOracle::new(Gaussian::standard(3));
        let mut r = rng::derive(&[42]);
        let (next, report) = trngvi_step(&q, &oracle, &step_cfg(), &mut r).unwrap();
        let mut max_change = 0.0f64;
        for (a, b) in next.comps[0].mean.iter().zip(&q.comps[0].mean) {
            max_change = max_change.max((a - b).abs());
        }
        for (a, b) in next.comps[0].chol.iter().zip(&q.comps[0].chol) {
            max_change = max_change.max((a - b).abs());
        }
        assert!(max_change < 1e-8, "fixed point moved by {max_change}");
        assert!(report.component_kls[0] < 1e-12);
    }

    #[test]
    fn converges_to_gaussian_target_within_200_steps() {
        let target = Gaussian::new(vec![0.7, -0.4], &[1.3, 0.4, 0.4, 0.6]).unwrap();
        let oracle = GaussianTargetOracle::new(target.clone());
        let q0 = GmmPosterior::single(Gaussian::standard(2));
        let mut r = rng::derive(&[7]);
        let cfg = step_cfg();
        let mut q = q0;
        let mut converged_at = None;
        for step in 0..200 {
            let (next, report) = trngvi_step(&q, &oracle, &cfg, &mut r).unwrap();
            for kl in &report.component_kls {
                assert!(*kl <= cfg.kl_bound + 1e-6, "trust region violated: {kl}");
            }
            q = next;
            if q.comps[0].kl(&target) < 1e-3 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "KL(q || target) did not reach 1e-3");
    }

    #[test]
    fn simplex_and_spd_preserved_over_many_steps() {
        let target = Gaussian::new(vec![0.5, 0.5], &[0.5, 0.0, 0.0, 0.5]).unwrap();
        let oracle = GaussianTargetOracle::new(target);
        let mut r = rng::derive(&[8]);
        let mut q = GmmPosterior::prior_init(3, 2, &mut r);
        let cfg = step_cfg();
        for _ in 0..50 {
            let (next, _) = trngvi_step(&q, &oracle, &cfg, &mut r).unwrap();
            next.validate().unwrap();
            let sum: f64 = next.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            q = next;
        }
    }

    #[test]
    fn uninformative_likelihood_returns_to_prior() {
        // oracle = prior only (standard normal): posterior equals the prior.
        let oracle = GaussianTargetOracle::new(Gaussian::standard(2));
        let start = Gaussian::new(vec![1.5, -2.0], &[0.2, 0.0, 0.0, 3.0]).unwrap();
        let q0 = GmmPosterior::single(start);
        let mut r = rng::derive(&[19]);
        let (q, _) = fit_posterior(&q0, &oracle, 400, &step_cfg(), &mut r).unwrap();
        let prior = Gaussian::standard(2);
        assert!(q.comps[0].kl(&prior) < 1e-3);
    }

    #[test]
    fn zero_steps_is_contract_violation() {
        let oracle = GaussianTargetOracle::new(Gaussian::standard(2));
        let q0 = GmmPosterior::single(Gaussian::standard(2));
        let mut r = rng::derive(&[1]);
        assert!(matches!(
            fit_posterior(&q0, &oracle, 0, &step_cfg(), &mut r),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bimodal_target_captures_both_modes() {
        // log p~ = log(0.6 N(-2, 0.3^2) + 0.4 N(2, 0.3^2)); quadrature oracle
        // locates the modes at -2 and 2 (separated narrow bumps).
        let logp = |z: f64| -> f64 {
            let a = (-0.5 * ((z + 2.0) / 0.3).powi(2)).exp() * 0.6 / (0.3 * (LN_2PI / 2.0).exp());
            let b = (-0.5 * ((z - 2.0) / 0.3).powi(2)).exp() * 0.4 / (0.3 * (LN_2PI / 2.0).exp());
            (a + b).ln()
        };
        // grid argmax oracle for the two mode locations
        let mut best_neg = (f64::NEG_INFINITY, 0.0);
        let mut best_pos = (f64::NEG_INFINITY, 0.0);
        for i in 0..4000 {
            let z = -4.0 + 8.0 * i as f64 / 3999.0;
            let v = logp(z);
            if z < 0.0 && v > best_neg.0 {
                best_neg = (v, z);
            }
            if z > 0.0 && v > best_pos.0 {
                best_pos = (v, z);
            }
        }
        assert!((best_neg.1 + 2.0).abs() < 0.01 && (best_pos.1 - 2.0).abs() < 0.01);

        let oracle = FnOracle {
            dim: 1,
            f: |z: &[f64]| {
                let h = 1e-6;
                Ok(OracleEval {
                    value: logp(z[0]),
                    grad: vec![(logp(z[0] + h) - logp(z[0] - h)) / (2.0 * h)],
                })
            },
        };
        let comps = vec![
            Gaussian::new(vec![-3.0], &[1.0]).unwrap(),
            Gaussian::new(vec![0.5], &[1.0]).unwrap(),
            Gaussian::new(vec![3.0], &[1.0]).unwrap(),
        ];
        let q0 = GmmPosterior::new(&[1.0 / 3.0; 3], comps).unwrap();
        let mut r = rng::derive(&[23]);
        let (q, _) = fit_posterior(&q0, &oracle, 500, &step_cfg(), &mut r).unwrap();

        let weights = q.weights();
        let mut near_neg = false;
        let mut near_pos = false;
        let mut surviving = 0;
        for (k, w) in weights.iter().enumerate() {
            if *w > 0.1 {
                surviving += 1;
                let m = q.comps[k].mean[0];
                if (m - best_neg.1).abs() < 0.1 {
                    near_neg = true;
                }
                if (m - best_pos.1).abs() < 0.1 {
                    near_pos = true;
                }
            }
        }
        assert!(surviving >= 2, "only {surviving} components survived");
        assert!(near_neg && near_pos, "means {:?} weights {:?}", q.comps.iter().map(|c| c.mean[0]).collect::<Vec<_>>(), weights);
    }

    #[test]
    fn deterministic_under_seed() {
        let target = Gaussian::new(vec![0.3, 0.1], &[0.7, 0.1, 0.1, 0.9]).unwrap();
        let oracle = GaussianTargetOracle::new(target);
        let q0 = GmmPosterior::prior_init(2, 2, &mut rng::derive(&[5]));
        let (a, _) = fit_posterior(&q0, &oracle, 20, &step_cfg(), &mut rng::derive(&[6])).unwrap();
        let (b, _) = fit_posterior(&q0, &oracle, 20, &step_cfg(), &mut rng::derive(&[6])).unwrap();
        assert_eq!(a, b);
    }
}
