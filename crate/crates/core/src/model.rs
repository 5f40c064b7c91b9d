//! The latent-conditioned simulator: MPN encoding, latent concatenation,
//! decoder to per-node trajectory weights, movement-primitive decoding, and
//! the Gaussian likelihood over deformable nodes. Also the task-posterior
//! oracle (log density + z-gradient) and the predictive distribution.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmm::GmmPosterior;
use crate::graph::MeshGraph;
use crate::mpn::{mpn_forward_on_tape, MpnConfig, MpnParams, MpnVars};
use crate::nn::LEAKY_SLOPE;
use crate::prodmp::{decode_on_tape, decode_trajectory, BasisMatrix};
use crate::rng::Rng;
use crate::stats::LN_2PI;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trngvi::{LogPosteriorOracle, OracleEval};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Node latent width H.
    pub latent: usize,
    /// Latent task descriptor width Z.
    pub z_dim: usize,
    /// Decoder hidden width (128 for 2-D tasks, 256 for 3-D).
    pub decoder_hidden: usize,
    /// Trajectory basis functions W.
    pub basis_count: usize,
    /// Gaussian likelihood standard deviation.
    pub sigma: f64,
    /// Message passing blocks.
    pub blocks: usize,
    /// Inner-loop repeats per block.
    pub repeats: usize,
    /// World dimension D.
    pub dim: usize,
    /// Node input feature width.
    pub node_in: usize,
    /// Edge input feature width.
    pub edge_in: usize,
    /// Fixed scale between decoder outputs and trajectory weights; the raw
    /// basis responses peak near 3e-3, so this keeps useful weights within
    /// reach of O(1) network outputs.
    pub weight_gain: f64,
}

impl ModelConfig {
    pub fn plate_2d() -> Self {
        ModelConfig {
            latent: 128,
            z_dim: 8,
            decoder_hidden: 128,
            basis_count: 10,
            sigma: 0.01,
            blocks: 5,
            repeats: 2,
            dim: 2,
            node_in: 2,
            edge_in: 6,
            weight_gain: 300.0,
        }
    }

    pub fn mpn_config(&self) -> MpnConfig {
        MpnConfig::new(self.node_in, self.edge_in, self.latent, self.blocks)
    }

    pub fn decoder_out(&self) -> usize {
        self.basis_count * self.dim
    }
}

/// Decoder mapping `[h ; z]` to per-node trajectory weights. The first layer
/// is stored split so the node part can be computed once and shared across
/// many z samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w_h: Tensor,
    pub w_z: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DecoderParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let fan_in = cfg.latent + cfg.z_dim;
        let scale1 = (2.0 / fan_in as f64).sqrt();
        let scale2 = (2.0 / cfg.decoder_hidden as f64).sqrt();
        let mut mk = |r: usize, c: usize, s: f64, rng: &mut Rng| {
            let data: Vec<f64> = (0..r * c)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * s)
                .collect();
            Tensor::from_parts(vec![r, c], data)
        };
        DecoderParams {
            w_h: mk(cfg.latent, cfg.decoder_hidden, scale1, rng),
            w_z: mk(cfg.z_dim, cfg.decoder_hidden, scale1, rng),
            b1: Tensor::vector(vec![0.0; cfg.decoder_hidden]),
            w2: mk(cfg.decoder_hidden, cfg.decoder_out(), scale2, rng),
            b2: Tensor::vector(vec![0.0; cfg.decoder_out()]),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        DecoderParams {
            w_h: Tensor::zeros(&[cfg.latent, cfg.decoder_hidden]),
            w_z: Tensor::zeros(&[cfg.z_dim, cfg.decoder_hidden]),
            b1: Tensor::vector(vec![0.0; cfg.decoder_hidden]),
            w2: Tensor::zeros(&[cfg.decoder_hidden, cfg.decoder_out()]),
            b2: Tensor::vector(vec![0.0; cfg.decoder_out()]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_h"), &self.w_h);
        f(format!("{prefix}.w_z"), &self.w_z);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_h"), &mut self.w_h);
        f(format!("{prefix}.w_z"), &mut self.w_z);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub mpn: MpnParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mpn = MpnParams::init(config.mpn_config(), rng)?;
        let decoder = DecoderParams::init(&config, rng);
        Ok(ModelParams {
            config,
            mpn,
            decoder,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.mpn.visit("mpn", f);
        self.decoder.visit("decoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mpn.visit_mut("mpn", f);
        self.decoder.visit_mut("decoder", f);
    }

    pub fn collect(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t.clone()));
        out
    }

    pub fn assign(&mut self, tensors: &[Tensor]) {
        let mut it = tensors.iter();
        self.visit_mut(&mut |_, t| {
            *t = it.next().expect("tensor count mismatch").clone();
        });
    }

    /// Content checksum over parameter bytes, for reproducibility checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, t| {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        });
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape handles to the decoder.
pub struct DecoderVars {
    pub w_h: Var,
    pub w_z: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DecoderVars {
    pub fn leaf(tape: &mut Tape, p: &DecoderParams) -> Self {
        DecoderVars {
            w_h: tape.leaf(p.w_h.clone()),
            w_z: tape.leaf(p.w_z.clone()),
            b1: tape.leaf(p.b1.clone()),
            w2: tape.leaf(p.w2.clone()),
            b2: tape.leaf(p.b2.clone()),
        }
    }

    pub fn constant(tape: &mut Tape, p: &DecoderParams) -> Self {
        DecoderVars {
            w_h: tape.constant(p.w_h.clone()),
            w_z: tape.constant(p.w_z.clone()),
            b1: tape.constant(p.b1.clone()),
            w2: tape.constant(p.w2.clone()),
            b2: tape.constant(p.b2.clone()),
        }
    }
}

/// Tape handles to all model parameters plus the vars in visit order (for
/// pairing gradients with `ModelParams::collect`).
pub struct ModelVars {
    pub mpn: MpnVars,
    pub decoder: DecoderVars,
    pub ordered: Vec<Var>,
}

impl ModelVars {
    pub fn leaf(tape: &mut Tape, params: &ModelParams) -> Self {
        let before = tape.len();
        let mpn = MpnVars::leaf(tape, &params.mpn);
        let decoder = DecoderVars::leaf(tape, &params.decoder);
        let after = tape.len();
        // leaves are pushed contiguously in visit order
        let ordered = (before..after).map(crate::tape::var_at).collect();
        ModelVars {
            mpn,
            decoder,
            ordered,
        }
    }
}

/// Decoder forward on the tape, sharing the precomputed `h_def @ w_h` term:
/// returns per-node weights `[Nd, W * D]` for one z (`[1, Z]`).
pub fn decoder_weights_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    dec: &DecoderVars,
    h_term: Var,
    z: Var,
) -> Result<Var> {
    let zrow = tape.matmul(z, dec.w_z)?; // 1 x hidden
    let zrow = tape.add_row(zrow, dec.b1)?; // fold bias into the z part
    let pre = tape.add_row(h_term, zrow)?;
    let hidden = tape.leaky_relu(pre, LEAKY_SLOPE)?;
    let mut out = tape.matmul(hidden, dec.w2)?;
    out = tape.add_row(out, dec.b2)?;
    tape.scale(out, cfg.weight_gain)
}

/// Context observations for a task posterior.
#[derive(Debug, Clone)]
pub enum Context {
    /// Observed full states: times in [0, 1] and targets `[C, Nd, D]`.
    States { times: Vec<f64>, targets: Tensor },
    /// Observed point clouds: one `[P, D]` cloud per context time.
    PointClouds { times: Vec<f64>, clouds: Vec<Tensor> },
}

impl Context {
    pub fn len(&self) -> usize {
        match self {
            Context::States { times, .. } => times.len(),
            Context::PointClouds { times, .. } => times.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn times(&self) -> &[f64] {
        match self {
            Context::States { times, .. } => times,
            Context::PointClouds { times, .. } => times,
        }
    }
}

/// Splits `[T, N, D]` targets into per-dimension `[Nd, T]` matrices (the
/// layout produced by decode_on_tape). Accepts full-node or deformable-only
/// target tensors.
pub fn targets_per_dim(targets: &Tensor, n_def: usize, dim: usize) -> Result<Vec<Arc<Tensor>>> {
    let shape = targets.shape();
    if shape.len() != 3 || shape[2] != dim || shape[1] < n_def {
        return Err(Error::contract(format!(
            "targets shape {shape:?}, expected [T, >= {n_def}, {dim}]"
        )));
    }
    let (t_len, n) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut data = vec![0.0; n_def * t_len];
        for t in 0..t_len {
            for node in 0..n_def {
                data[node * t_len + t] = targets.data()[(t * n + node) * dim + d];
            }
        }
        out.push(Arc::new(Tensor::from_parts(vec![n_def, t_len], data)));
    }
    Ok(out)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::contract("query times must lie in [0, 1]"));
    }
    Ok(())
}

/// Likelihood of state targets on the tape given decoded per-dim predictions.
fn states_likelihood(
    tape: &mut Tape,
    preds_per_dim: &[Var],
    targets: &[Arc<Tensor>],
    sigma: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (pred, target) in preds_per_dim.iter().zip(targets) {
        let ll = crate::stats::gaussian_log_density_tape(tape, *pred, target.clone(), sigma)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ll)?,
            None => ll,
        });
    }
    Ok(total.expect("at least one dimension"))
}

/// Point-cloud likelihood: every observed point contributes a Gaussian term
/// centered at the nearest predicted deformable-node position at that
/// timestep. The nearest-node assignment is recomputed from current values
/// per evaluation and held fixed inside the gradient.
fn pointcloud_likelihood(
    tape: &mut Tape,
    preds_per_dim: &[Var],
    clouds: &[Tensor],
    n_def: usize,
    t_len: usize,
    sigma: f64,
) -> Result<Var> {
    let dim = preds_per_dim.len();
    let mut total: Option<Var> = None;
    for (j, cloud) in clouds.iter().enumerate() {
        let p = cloud.rows();
        // nearest predicted node per point, from current values
        let mut assign = Vec::with_capacity(p);
        for pi in 0..p {
            let point = cloud.row_slice(pi);
            let mut best = (f64::INFINITY, 0usize);
            for node in 0..n_def {
                let mut d2 = 0.0;
                for (d, pv) in preds_per_dim.iter().enumerate() {
                    let diff = tape.value(*pv).get2(node, j) - point[d];
                    d2 += diff * diff;
                }
                if d2 < best.0 {
                    best = (d2, node);
                }
            }
            assign.push(best.1);
        }
        for (d, pv) in preds_per_dim.iter().enumerate().take(dim) {
            let idx: Arc<Vec<usize>> = Arc::new(assign.iter().map(|&n| n * t_len + j).collect());
            let picked = tape.gather_flat(*pv, idx)?; // P x 1
            let target: Vec<f64> = (0..p).map(|pi| cloud.get2(pi, d)).collect();
            let target = Arc::new(Tensor::from_parts(vec![p, 1], target));
            let ll = crate::stats::gaussian_log_density_tape(tape, picked, target, sigma)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ll)?,
                None => ll,
            });
        }
    }
    total.ok_or_else(|| Error::contract("empty point-cloud context"))
}

/// Builds the conditional log-likelihood on an existing tape, starting from
/// per-node latents `h` (`[N, H]`): slices deformable rows, concatenates z
/// through the decoder, decodes trajectory positions at `times`, and sums the
/// Gaussian log-likelihood over deformable nodes only.
#[allow(clippy::too_many_arguments)]
pub fn likelihood_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    dec: &DecoderVars,
    h_term: Var,
    z: Var,
    basis: &BasisMatrix,
    y0_def: &Tensor,
    context: &Context,
    n_def: usize,
) -> Result<Var> {
    check_times(context.times())?;
    if context.is_empty() {
        return Err(Error::contract("empty context"));
    }
    let weights = decoder_weights_on_tape(tape, cfg, dec, h_term, z)?;
    let preds = decode_on_tape(tape, basis, weights, y0_def, context.times())?;
    match context {
        Context::States { targets, .. } => {
            let tpd = targets_per_dim(targets, n_def, cfg.dim)?;
            states_likelihood(tape, &preds, &tpd, cfg.sigma)
        }
        Context::PointClouds { clouds, times } => {
            pointcloud_likelihood(tape, &preds, clouds, n_def, times.len(), cfg.sigma)
        }
    }
}

fn deformable_rows(graph: &MeshGraph) -> Arc<Vec<usize>> {
    Arc::new((0..graph.n_deformable).collect())
}

fn y0_deformable(graph: &MeshGraph) -> Tensor {
    let nd = graph.n_deformable;
    let d = graph.dim;
    let mut data = Vec::with_capacity(nd * d);
    for i in 0..nd {
        data.extend_from_slice(graph.positions.row_slice(i));
    }
    Tensor::from_parts(vec![nd, d], data)
}

/// Full conditional log-likelihood `log p(y | x, z, G)`: runs the MPN,
/// concatenates z to every node latent via the decoder, decodes positions at
/// `times`, and sums the node-wise Gaussian log-likelihood over deformable
/// nodes. Collider nodes never contribute.
pub fn conditional_log_likelihood(
    params: &ModelParams,
    graph: &MeshGraph,
    basis: &BasisMatrix,
    z: &[f64],
    times: &[f64],
    targets: &Tensor,
) -> Result<f64> {
    let cfg = &params.config;
    if z.len() != cfg.z_dim {
        return Err(Error::contract(format!(
            "z has dim {}, expected {}",
            z.len(),
            cfg.z_dim
        )));
    }
    let mut tape = Tape::new();
    let vars = MpnVars::constant(&mut tape, &params.mpn);
    let nf = tape.constant(graph.node_features(None));
    let ef = tape.constant(graph.initial_edge_features()?);
    let h = mpn_forward_on_tape(
        &mut tape,
        &cfg.mpn_config(),
        &vars,
        nf,
        ef,
        &graph.send,
        &graph.recv,
        graph.n_nodes(),
        cfg.repeats,
    )?;
    let h_def = tape.gather_rows(h, deformable_rows(graph))?;
    let dec = DecoderVars::constant(&mut tape, &params.decoder);
    let h_term = tape.matmul(h_def, dec.w_h)?;
    let zv = tape.constant(Tensor::row(z.to_vec()));
    let context = Context::States {
        times: times.to_vec(),
        targets: targets.clone(),
    };
    let ll = likelihood_on_tape(
        &mut tape,
        cfg,
        &dec,
        h_term,
        zv,
        basis,
        &y0_deformable(graph),
        &context,
        graph.n_deformable,
    )?;
    tape.value(ll).item()
}

/// Task-posterior oracle: `log p~(z) = log p(context | z) + log p(z)` with its
/// z-gradient from reverse-mode differentiation. The MPN runs once at
/// construction; each evaluation only replays the decoder head.
pub struct ModelOracle {
    cfg: ModelConfig,
    decoder: DecoderParams,
    basis: Arc<BasisMatrix>,
    /// Precomputed `h_def @ w_h` (shared across evaluations).
    h_term: Tensor,
    y0_def: Tensor,
    n_def: usize,
    context: Context,
}

impl ModelOracle {
    pub fn from_h(
        params: &ModelParams,
        basis: Arc<BasisMatrix>,
        h: &Tensor,
        graph: &MeshGraph,
        context: Context,
    ) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::contract("empty context"));
        }
        check_times(context.times())?;
        let nd = graph.n_deformable;
        let mut h_def = Vec::with_capacity(nd * params.config.latent);
        for i in 0..nd {
            h_def.extend_from_slice(h.row_slice(i));
        }
        let h_def = Tensor::from_parts(vec![nd, params.config.latent], h_def);
        let h_term = h_def.matmul(&params.decoder.w_h)?;
        Ok(ModelOracle {
            cfg: params.config.clone(),
            decoder: params.decoder.clone(),
            basis,
            h_term,
            y0_def: y0_deformable(graph),
            n_def: nd,
            context,
        })
    }
}

impl LogPosteriorOracle for ModelOracle {
    fn dim(&self) -> usize {
        self.cfg.z_dim
    }

    fn eval(&self, z: &[f64]) -> Result<OracleEval> {
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::row(z.to_vec()));
        let dec = DecoderVars::constant(&mut tape, &self.decoder);
        let h_term = tape.constant(self.h_term.clone());
        let ll = likelihood_on_tape(
            &mut tape,
            &self.cfg,
            &dec,
            h_term,
            zv,
            &self.basis,
            &self.y0_def,
            &self.context,
            self.n_def,
        )?;
        // + log p(z) under the standard-normal prior
        let zeros = Arc::new(Tensor::zeros(&[1, z.len()]));
        let sq = tape.squared_diff_sum(zv, zeros)?;
        let prior = tape.affine_scalar(sq, -0.5, -0.5 * z.len() as f64 * LN_2PI)?;
        let obj = tape.add(ll, prior)?;
        let value = tape.value(obj).item()?;
        let grads = tape.grad(obj, &[zv])?;
        Ok(OracleEval {
            value,
            grad: grads[0].data().to_vec(),
        })
    }
}

/// Builds the posterior oracle from scratch (runs the MPN once).
pub fn posterior_oracle(
    params: &ModelParams,
    graph: &MeshGraph,
    basis: Arc<BasisMatrix>,
    context: Context,
) -> Result<ModelOracle> {
    let h = crate::mpn::mpn_forward(&params.mpn, graph, params.config.repeats)?;
    ModelOracle::from_h(params, basis, &h, graph, context)
}

/// Monte-Carlo predictive bundle for one task.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// One decoded trajectory per posterior sample, `[T, N, D]` with collider
    /// rows following the prescribed signal.
    pub trajectories: Vec<Tensor>,
    /// Posterior log-density of each sampled z.
    pub sample_logq: Vec<f64>,
    /// Trajectory decoded at the mean of the highest-weight component.
    pub summary: Tensor,
}

/// Decodes one full-node trajectory for a given z value.
pub fn decode_for_z(
    params: &ModelParams,
    basis: &BasisMatrix,
    h: &Tensor,
    graph: &MeshGraph,
    z: &[f64],
    times: &[f64],
    collider_signal: Option<&Tensor>,
) -> Result<Tensor> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let dec = DecoderVars::constant(&mut tape, &params.decoder);
    let nd = graph.n_deformable;
    let mut h_def = Vec::with_capacity(nd * cfg.latent);
    for i in 0..nd {
        h_def.extend_from_slice(h.row_slice(i));
    }
    let h_def = tape.constant(Tensor::from_parts(vec![nd, cfg.latent], h_def));
    let h_term = tape.matmul(h_def, dec.w_h)?;
    let zv = tape.constant(Tensor::row(z.to_vec()));
    let wv = decoder_weights_on_tape(&mut tape, cfg, &dec, h_term, zv)?;
    let weights = tape.value(wv).clone();
    let traj_def = decode_trajectory(basis, &weights, &y0_deformable(graph), times)?;
    Ok(assemble_full_trajectory(graph, &traj_def, times, collider_signal))
}

/// Expands a deformable-only `[T, Nd, D]` trajectory to all nodes; collider
/// rows follow the prescribed signal exactly (or stay at their initial
/// positions when no signal is given).
pub fn assemble_full_trajectory(
    graph: &MeshGraph,
    traj_def: &Tensor,
    times: &[f64],
    collider_signal: Option<&Tensor>,
) -> Tensor {
    let (nd, nc, d) = (graph.n_deformable, graph.n_collider, graph.dim);
    let n = nd + nc;
    let t_len = times.len();
    let mut out = vec![0.0; t_len * n * d];
    for t in 0..t_len {
        for node in 0..nd {
            for k in 0..d {
                out[(t * n + node) * d + k] = traj_def.data()[(t * nd + node) * d + k];
            }
        }
        for c in 0..nc {
            for k in 0..d {
                let v = match collider_signal {
                    Some(sig) => sig.data()[(t * nc + c) * d + k],
                    None => graph.positions.get2(nd + c, k),
                };
                out[(t * n + nd + c) * d + k] = v;
            }
        }
    }
    Tensor::from_parts(vec![t_len, n, d], out)
}

/// Predictive distribution: draws `n_samples` latents from the posterior and
/// decodes one trajectory per sample; the summary trajectory decodes at the
/// mean of the highest-weight component.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    params: &ModelParams,
    graph: &MeshGraph,
    basis: &BasisMatrix,
    q: &GmmPosterior,
    times: &[f64],
    n_samples: usize,
    collider_signal: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<PredictionBundle> {
    if n_samples < 1 {
        return Err(Error::contract("n_samples must be >= 1"));
    }
    check_times(times)?;
    let h = crate::mpn::mpn_forward(&params.mpn, graph, params.config.repeats)?;
    let samples = q.sample(n_samples, rng)?;
    let mut trajectories = Vec::with_capacity(n_samples);
    let mut sample_logq = Vec::with_capacity(n_samples);
    for z in &samples {
        trajectories.push(decode_for_z(
            params,
            basis,
            &h,
            graph,
            z,
            times,
            collider_signal,
        )?);
        sample_logq.push(q.log_density(z));
    }
    let best = q
        .log_weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(k, _)| k)
        .unwrap_or(0);
    let summary = decode_for_z(
        params,
        basis,
        &h,
        graph,
        &q.comps[best].mean,
        times,
        collider_signal,
    )?;
    Ok(PredictionBundle {
        trajectories,
        sample_logq,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::Gaussian;
    use rand::Rng as _;
    use crate::graph::{build_graph, ObjectMesh};
    use crate::oracles::{finite_difference_vec, max_rel_error};
    use crate::rng;

    fn small_setup(seed: u64) -> (ModelParams, MeshGraph, Arc<BasisMatrix>) {
        let mut cfg = ModelConfig::plate_2d();
        cfg.latent = 16;
        cfg.decoder_hidden = 12;
        cfg.blocks = 2;
        cfg.basis_count = 4;
        let plate = ObjectMesh::new(
            Tensor::matrix(4, 2, vec![0.0, 0.0, 0.25, 0.0, 0.0, 0.25, 0.25, 0.25]).unwrap(),
            vec![(0, 1), (0, 2), (1, 3), (2, 3)],
        );
        let collider = ObjectMesh::new(Tensor::matrix(1, 2, vec![0.125, 0.5]).unwrap(), vec![]);
        let graph = build_graph(&plate, &collider, 0.3).unwrap();
        let params = ModelParams::init(cfg, &mut rng::derive(&[seed])).unwrap();
        let basis = Arc::new(BasisMatrix::build(4, 128, 25.0).unwrap());
        (params, graph, basis)
    }

    fn times3() -> Vec<f64> {
        vec![0.3, 0.6, 1.0]
    }

    #[test]
    fn self_targets_reach_gaussian_mode() {
        let (params, graph, basis) = small_setup(3);
        let z = vec![0.1; 8];
        let h = crate::mpn::mpn_forward(&params.mpn, &graph, params.config.repeats).unwrap();
        let own = decode_for_z(&params, &basis, &h, &graph, &z, &times3(), None).unwrap();
        let ll = conditional_log_likelihood(&params, &graph, &basis, &z, &times3(), &own).unwrap();
        let coords = (graph.n_deformable * 2 * times3().len()) as f64;
        let mode = 3.6862316527834233;
        assert!(
            (ll - coords * mode).abs() < 1e-9,
            "ll {ll} vs {}",
            coords * mode
        );
    }

    #[test]
    fn zero_decoder_ignores_z_and_perturbation_is_quadratic() {
        let (mut params, graph, basis) = small_setup(4);
        params.decoder = DecoderParams::zeros(&params.config);
        let times = times3();
        let h = crate::mpn::mpn_forward(&params.mpn, &graph, params.config.repeats).unwrap();
        let targets = decode_for_z(&params, &basis, &h, &graph, &[0.0; 8], &times, None).unwrap();
        let a =
            conditional_log_likelihood(&params, &graph, &basis, &[1.0; 8], &times, &targets).unwrap();
        let b =
            conditional_log_likelihood(&params, &graph, &basis, &[-2.0; 8], &times, &targets).unwrap();
        assert_eq!(a, b);

        // perturb one coordinate by delta: value drops by delta^2 / (2 sigma^2)
        let delta = 0.003;
        let mut perturbed = targets.clone();
        perturbed.data_mut()[0] += delta;
        let c =
            conditional_log_likelihood(&params, &graph, &basis, &[1.0; 8], &times, &perturbed)
                .unwrap();
        let sigma = params.config.sigma;
        let expected_drop = delta * delta / (2.0 * sigma * sigma);
        assert!(((a - c) - expected_drop).abs() < 1e-9, "drop {}", a - c);
    }

    #[test]
    fn oracle_gradient_matches_finite_differences() {
        let (params, graph, basis) = small_setup(5);
        let times = times3();
        let mut r = rng::derive(&[50]);
        let h = crate::mpn::mpn_forward(&params.mpn, &graph, params.config.repeats).unwrap();
        let z_true: Vec<f64> = (0..8).map(|_| r.gen_range(-0.5..0.5)).collect();
        let targets = decode_for_z(&params, &basis, &h, &graph, &z_true, &times, None).unwrap();
        let oracle = posterior_oracle(
            &params,
            &graph,
            basis.clone(),
            Context::States {
                times: times.clone(),
                targets,
            },
        )
        .unwrap();
        let z0: Vec<f64> = (0..8).map(|_| r.gen_range(-0.5..0.5)).collect();
        let eval = oracle.eval(&z0).unwrap();
        let fd = finite_difference_vec(&z0, 1e-5, |z| oracle.eval(z).unwrap().value);
        let err = max_rel_error(&eval.grad, &fd, 1e-3);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn zero_decoder_oracle_gradient_is_prior_gradient() {
        let (mut params, graph, basis) = small_setup(6);
        params.decoder = DecoderParams::zeros(&params.config);
        let times = times3();
        let h = crate::mpn::mpn_forward(&params.mpn, &graph, params.config.repeats).unwrap();
        let targets = decode_for_z(&params, &basis, &h, &graph, &[0.0; 8], &times, None).unwrap();
        let oracle = posterior_oracle(
            &params,
            &graph,
            basis,
            Context::States {
                times,
                targets,
            },
        )
        .unwrap();
        let z = vec![0.7, -0.3, 0.2, 0.0, 1.1, -0.6, 0.4, 0.9];
        let eval = oracle.eval(&z).unwrap();
        for (g, zi) in eval.grad.iter().zip(&z) {
            assert!((g + zi).abs() < 1e-12, "grad {g} vs -z {}", -zi);
        }
    }

    #[test]
    fn empty_context_is_contract_violation() {
        let (params, graph, basis) = small_setup(7);
        let err = posterior_oracle(
            &params,
            &graph,
            basis,
            Context::States {
                times: vec![],
                targets: Tensor::zeros(&[0, 4, 2]),
            },
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn point_mass_posterior_gives_tight_trajectories() {
        let (params, graph, basis) = small_setup(8);
        let eps = 1e-12;
        let g = Gaussian::new(vec![0.2; 8], &{
            let mut cov = vec![0.0; 64];
            for i in 0..8 {
                cov[i * 8 + i] = eps;
            }
            cov
        })
        .unwrap();
        let q = GmmPosterior::single(g);
        let bundle = predict(
            &params,
            &graph,
            &basis,
            &q,
            &times3(),
            6,
            None,
            &mut rng::derive(&[2]),
        )
        .unwrap();
        for t in &bundle.trajectories {
            for (a, b) in t.data().iter().zip(bundle.trajectories[0].data()) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn zero_decoder_predicts_constant_y0() {
        let (mut params, graph, basis) = small_setup(9);
        params.decoder = DecoderParams::zeros(&params.config);
        let q = GmmPosterior::single(Gaussian::standard(8));
        let bundle = predict(
            &params,
            &graph,
            &basis,
            &q,
            &times3(),
            3,
            None,
            &mut rng::derive(&[3]),
        )
        .unwrap();
        let n = graph.n_nodes();
        for traj in bundle.trajectories.iter().chain([&bundle.summary]) {
            for t in 0..times3().len() {
                for node in 0..n {
                    for k in 0..2 {
                        assert_eq!(
                            traj.data()[(t * n + node) * 2 + k],
                            graph.positions.get2(node, k)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn multimodal_posterior_yields_clustered_trajectories() {
        let (params, graph, basis) = small_setup(10);
        let tiny = {
            let mut cov = vec![0.0; 64];
            for i in 0..8 {
                cov[i * 8 + i] = 1e-10;
            }
            cov
        };
        let a = Gaussian::new(vec![2.5; 8], &tiny).unwrap();
        let b = Gaussian::new(vec![-2.5; 8], &tiny).unwrap();
        let q = GmmPosterior::new(&[0.5, 0.5], vec![a, b]).unwrap();
        let bundle = predict(
            &params,
            &graph,
            &basis,
            &q,
            &times3(),
            40,
            None,
            &mut rng::derive(&[4]),
        )
        .unwrap();
        // cluster the final-step x coordinate of node 0 with the two-means oracle
        let n = graph.n_nodes();
        let summaries: Vec<f64> = bundle
            .trajectories
            .iter()
            .map(|t| t.data()[((times3().len() - 1) * n) * 2])
            .collect();
        let (_, _, n0, n1, spread, separation) = crate::oracles::two_means(&summaries, 50);
        assert!(n0 > 0 && n1 > 0, "only one cluster found");
        assert!(
            separation > spread,
            "separation {separation} <= spread {spread}"
        );
    }

    #[test]
    fn translation_equivariance_exact_on_dyadic_offsets() {
        let (params, graph, basis) = small_setup(11);
        let times = times3();
        let z = vec![0.3; 8];
        let h = crate::mpn::mpn_forward(&params.mpn, &graph, params.config.repeats).unwrap();
        let base = decode_for_z(&params, &basis, &h, &graph, &z, &times, None).unwrap();

        let shift = 0.5; // dyadic: exact under f64 addition of quarter-grid coords
        let moved = graph
            .with_positions(graph.positions.map(|v| v + shift))
            .unwrap();
        let h2 = crate::mpn::mpn_forward(&params.mpn, &moved, params.config.repeats).unwrap();
        assert_eq!(h.data(), h2.data());
        let shifted = decode_for_z(&params, &basis, &h2, &moved, &z, &times, None).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!((a + shift - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pointcloud_oracle_gradient_matches_finite_differences() {
        let (params, graph, basis) = small_setup(12);
        let times = vec![0.5, 1.0];
        let clouds = vec![
            Tensor::matrix(3, 2, vec![0.1, 0.05, 0.2, 0.2, 0.0, 0.15]).unwrap(),
            Tensor::matrix(2, 2, vec![0.15, 0.1, 0.05, 0.0]).unwrap(),
        ];
        let oracle = posterior_oracle(
            &params,
            &graph,
            basis,
            Context::PointClouds { times, clouds },
        )
        .unwrap();
        let z: Vec<f64> = vec![0.3, -0.2, 0.5, 0.0, -0.4, 0.1, 0.2, -0.1];
        let eval = oracle.eval(&z).unwrap();
        let fd = finite_difference_vec(&z, 1e-6, |z| oracle.eval(z).unwrap().value);
        let err = max_rel_error(&eval.grad, &fd, 1e-3);
        assert!(err < 1e-4, "max rel error {err}");
    }
}
