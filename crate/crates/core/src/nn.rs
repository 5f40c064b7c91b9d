//! Neural building blocks: MLPs with leaky-ReLU, layer normalization, and
//! residual connections, expressed as tape ops.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Negative slope of every leaky-ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Layer-norm variance epsilon, small enough that normalized rows carry unit
/// variance to well below 1e-10 at f64.
pub const LN_EPS: f64 = 1e-12;

/// Architecture of one MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Negative slope of the leaky-ReLU applied after every hidden layer.
    pub leaky_slope: f64,
    /// Layer normalization (with learnable affine) on the final output,
    /// applied after the residual connection when one is configured.
    pub layer_norm: bool,
    /// Residual connection from the skip input to the output.
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        MlpSpec {
            input,
            hidden,
            output,
            leaky_slope: LEAKY_SLOPE,
            layer_norm: false,
            residual: false,
        }
    }

    pub fn with_layer_norm(mut self) -> Self {
        self.layer_norm = true;
        self
    }

    pub fn with_residual(mut self) -> Self {
        self.residual = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.residual && self.input != self.output {
            return Err(Error::contract(format!(
                "residual connection requires input width == output width ({} != {})",
                self.input, self.output
            )));
        }
        if self.input == 0 || self.output == 0 {
            return Err(Error::contract("zero-width MLP"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        let mut n: usize = self.widths().iter().map(|(i, o)| i * o + o).sum();
        if self.layer_norm {
            n += 2 * self.output;
        }
        n
    }
}

/// Weights and biases for an [`MlpSpec`], plus layer-norm affine when enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub ln_gamma: Option<Tensor>,
    pub ln_beta: Option<Tensor>,
}

impl MlpParams {
    /// He-style initialization scaled by fan-in.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.widths() {
            let scale = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    v * scale
                })
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::vector(vec![0.0; fan_out]));
        }
        let (ln_gamma, ln_beta) = if spec.layer_norm {
            (
                Some(Tensor::vector(vec![1.0; spec.output])),
                Some(Tensor::vector(vec![0.0; spec.output])),
            )
        } else {
            (None, None)
        };
        Ok(MlpParams {
            weights,
            biases,
            ln_gamma,
            ln_beta,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.widths() {
            weights.push(Tensor::zeros(&[fan_in, fan_out]));
            biases.push(Tensor::vector(vec![0.0; fan_out]));
        }
        let (ln_gamma, ln_beta) = if spec.layer_norm {
            (
                Some(Tensor::vector(vec![1.0; spec.output])),
                Some(Tensor::vector(vec![0.0; spec.output])),
            )
        } else {
            (None, None)
        };
        Ok(MlpParams {
            weights,
            biases,
            ln_gamma,
            ln_beta,
        })
    }

    // order matches MlpVars::leaf: all weights, all biases, then layer norm
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, w) in self.weights.iter().enumerate() {
            f(format!("{prefix}.w{i}"), w);
        }
        for (i, b) in self.biases.iter().enumerate() {
            f(format!("{prefix}.b{i}"), b);
        }
        if let Some(g) = &self.ln_gamma {
            f(format!("{prefix}.ln_gamma"), g);
        }
        if let Some(b) = &self.ln_beta {
            f(format!("{prefix}.ln_beta"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, w) in self.weights.iter_mut().enumerate() {
            f(format!("{prefix}.w{i}"), w);
        }
        for (i, b) in self.biases.iter_mut().enumerate() {
            f(format!("{prefix}.b{i}"), b);
        }
        if let Some(g) = &mut self.ln_gamma {
            f(format!("{prefix}.ln_gamma"), g);
        }
        if let Some(b) = &mut self.ln_beta {
            f(format!("{prefix}.ln_beta"), b);
        }
    }
}

/// Tape handles to one MLP's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub ln: Option<(Var, Var)>,
}

impl MlpVars {
    pub fn leaf(tape: &mut Tape, params: &MlpParams) -> Self {
        MlpVars {
            weights: params.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: params.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
            ln: params
                .ln_gamma
                .as_ref()
                .zip(params.ln_beta.as_ref())
                .map(|(g, b)| (tape.leaf(g.clone()), tape.leaf(b.clone()))),
        }
    }

    pub fn constant(tape: &mut Tape, params: &MlpParams) -> Self {
        MlpVars {
            weights: params
                .weights
                .iter()
                .map(|w| tape.constant(w.clone()))
                .collect(),
            biases: params
                .biases
                .iter()
                .map(|b| tape.constant(b.clone()))
                .collect(),
            ln: params
                .ln_gamma
                .as_ref()
                .zip(params.ln_beta.as_ref())
                .map(|(g, b)| (tape.constant(g.clone()), tape.constant(b.clone()))),
        }
    }
}

/// Runs the MLP on the tape. `input` is `[rows, spec.input]`; the optional
/// `skip` (defaults to `input`) feeds the residual connection.
pub fn mlp_apply(
    tape: &mut Tape,
    spec: &MlpSpec,
    vars: &MlpVars,
    input: Var,
    skip: Option<Var>,
) -> Result<Var> {
    if tape.value(input).cols() != spec.input {
        return Err(Error::contract(format!(
            "mlp input width {} != spec input {}",
            tape.value(input).cols(),
            spec.input
        )));
    }
    let n_layers = vars.weights.len();
    let mut h = input;
    for l in 0..n_layers {
        h = tape.matmul(h, vars.weights[l])?;
        h = tape.add_row(h, vars.biases[l])?;
        if l + 1 < n_layers {
            h = tape.leaky_relu(h, spec.leaky_slope)?;
        }
    }
    if spec.residual {
        let s = skip.unwrap_or(input);
        h = tape.add(h, s)?;
    }
    if let Some((gamma, beta)) = vars.ln {
        h = tape.layer_norm(h, gamma, beta, LN_EPS)?;
    }
    Ok(h)
}

/// Plain forward pass: builds a throwaway tape. Deterministic given params
/// and input.
pub fn mlp_forward(spec: &MlpSpec, params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = MlpVars::constant(&mut tape, params);
    let x = tape.constant(input.clone());
    let out = mlp_apply(&mut tape, spec, &vars, x, None)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(3, vec![5], 2);
        let params = MlpParams::zeros(&spec).unwrap();
        let x = Tensor::matrix(4, 3, vec![0.5; 12]).unwrap();
        let y = mlp_forward(&spec, &params, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let spec = MlpSpec::new(3, vec![], 3);
        let mut params = MlpParams::zeros(&spec).unwrap();
        params.weights[0] =
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 4.0, 0.0, -0.5]).unwrap();
        let y = mlp_forward(&spec, &params, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = MlpSpec::new(4, vec![8], 3).with_layer_norm();
        let mut r = rng::derive(&[1]);
        let params = MlpParams::init(&spec, &mut r).unwrap();
        let x = Tensor::matrix(5, 4, (0..20).map(|i| (i as f64) * 0.1 - 1.0).collect()).unwrap();
        let a = mlp_forward(&spec, &params, &x).unwrap();
        let b = mlp_forward(&spec, &params, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn input_width_mismatch_is_contract_violation() {
        let spec = MlpSpec::new(3, vec![], 2);
        let params = MlpParams::zeros(&spec).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(
            mlp_forward(&spec, &params, &x),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn residual_requires_matching_widths() {
        let spec = MlpSpec::new(3, vec![4], 2).with_residual();
        assert!(spec.validate().is_err());
        let ok = MlpSpec::new(3, vec![4], 3).with_residual();
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn leaky_relu_identity_on_non_negative_and_monotone() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = (-50..50).map(|i| i as f64 * 0.1).collect();
        let x = tape.constant(Tensor::vector(xs.clone()).reshape(vec![100, 1]).unwrap());
        let y = tape.leaky_relu(x, LEAKY_SLOPE).unwrap();
        let out = tape.value(y).data().to_vec();
        for (i, (&xi, &yi)) in xs.iter().zip(&out).enumerate() {
            if xi >= 0.0 {
                assert_eq!(xi, yi);
            }
            if i > 0 {
                assert!(out[i] >= out[i - 1]);
            }
        }
    }
}
