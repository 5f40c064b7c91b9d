//! Gaussian log-density helpers.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Sum over all coordinates of `log N(y_i | mean_i, sigma^2)`.
pub fn gaussian_log_density(y: &Tensor, mean: &Tensor, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if y.shape() != mean.shape() {
        return Err(Error::contract(format!(
            "gaussian_log_density: shape {:?} vs {:?}",
            y.shape(),
            mean.shape()
        )));
    }
    let m = y.len() as f64;
    let sq: f64 = y
        .data()
        .iter()
        .zip(mean.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(-0.5 * sq / (sigma * sigma) - m * (sigma.ln() + 0.5 * LN_2PI))
}

/// Tape version with constant targets: returns a scalar var equal to
/// `sum_i log N(target_i | pred_i, sigma^2)`.
pub fn gaussian_log_density_tape(
    tape: &mut Tape,
    pred: Var,
    target: Arc<Tensor>,
    sigma: f64,
) -> Result<Var> {
    if sigma <= 0.0 {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    let m = target.len() as f64;
    let sq = tape.squared_diff_sum(pred, target)?;
    tape.affine_scalar(sq, -0.5 / (sigma * sigma), -m * (sigma.ln() + 0.5 * LN_2PI))
}

/// Log density of a standard normal vector.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODE_001: f64 = 3.6862316527834233; // -ln(0.01 * sqrt(2 pi))

    #[test]
    fn mode_value_at_sigma_001() {
        let y = Tensor::vector(vec![0.3]);
        let v = gaussian_log_density(&y, &y, 0.01).unwrap();
        assert!((v - MODE_001).abs() < 1e-12, "{v}");
    }

    #[test]
    fn one_sigma_offset_costs_half() {
        let y = Tensor::vector(vec![0.01]);
        let mean = Tensor::vector(vec![0.0]);
        let v = gaussian_log_density(&y, &mean, 0.01).unwrap();
        assert!((v - (MODE_001 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn additivity_over_coordinates() {
        // 81 nodes x 2 dims at the mode: 162 x mode value.
        let y = Tensor::zeros(&[81, 2]);
        let v = gaussian_log_density(&y, &y, 0.01).unwrap();
        assert!((v - 162.0 * MODE_001).abs() < 1e-9, "{v}");
        assert!((v - 597.169).abs() < 0.01);
    }

    #[test]
    fn non_positive_sigma_is_contract_violation() {
        let y = Tensor::vector(vec![0.0]);
        assert!(gaussian_log_density(&y, &y, 0.0).is_err());
        assert!(gaussian_log_density(&y, &y, -1.0).is_err());
    }

    #[test]
    fn tape_version_matches_plain() {
        let pred = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.9]).unwrap();
        let target = Tensor::matrix(2, 3, vec![0.15, 0.2, -0.1, 0.4, -0.2, 1.0]).unwrap();
        let plain = gaussian_log_density(&target, &pred, 0.05).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(pred);
        let v = gaussian_log_density_tape(&mut tape, p, Arc::new(target), 0.05).unwrap();
        assert!((tape.value(v).item().unwrap() - plain).abs() < 1e-12);
    }
}
