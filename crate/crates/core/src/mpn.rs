//! Message-passing network: stacked edge-update / node-update blocks with
//! mean aggregation, residual connections, and layer normalization, producing
//! per-node latent features from a mesh graph.
//!
//! Each of the `blocks` blocks runs its edge update then node update
//! `repeats` times with the same block parameters before the next block.
//! Edges with no incoming contribution aggregate to the zero vector.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::MeshGraph;
use crate::nn::{mlp_apply, MlpParams, MlpSpec, MlpVars, LEAKY_SLOPE, LN_EPS};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MpnConfig {
    /// Node input feature width (one-hot kind, plus material when present).
    pub node_in: usize,
    /// Edge input feature width.
    pub edge_in: usize,
    /// Latent width H shared by all blocks.
    pub latent: usize,
    /// Message passing blocks.
    pub blocks: usize,
}

impl MpnConfig {
    pub fn new(node_in: usize, edge_in: usize, latent: usize, blocks: usize) -> Self {
        MpnConfig {
            node_in,
            edge_in,
            latent,
            blocks,
        }
    }

    fn embed_spec(&self, input: usize) -> MlpSpec {
        MlpSpec::new(input, vec![self.latent], self.latent).with_layer_norm()
    }
}

/// One block's parameters. The edge update MLP takes `[h_recv, h_send, h_e]`;
/// its first layer is stored as three H x H pieces so the node parts can be
/// computed per node and gathered per edge. The node update MLP takes
/// `[h_v, mean-aggregated edge latents]`, stored likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub edge_w_recv: Tensor,
    pub edge_w_send: Tensor,
    pub edge_w_edge: Tensor,
    pub edge_b1: Tensor,
    pub edge_w2: Tensor,
    pub edge_b2: Tensor,
    pub edge_ln_gamma: Tensor,
    pub edge_ln_beta: Tensor,
    pub node_w_self: Tensor,
    pub node_w_agg: Tensor,
    pub node_b1: Tensor,
    pub node_w2: Tensor,
    pub node_b2: Tensor,
    pub node_ln_gamma: Tensor,
    pub node_ln_beta: Tensor,
}

impl BlockParams {
    fn init(latent: usize, rng: &mut Rng) -> Self {
        let h = latent;
        let mat = |fan_in: usize, rng: &mut Rng| {
            let scale = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..h * h)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    v * scale
                })
                .collect();
            Tensor::from_parts(vec![h, h], data)
        };
        BlockParams {
            edge_w_recv: mat(3 * h, rng),
            edge_w_send: mat(3 * h, rng),
            edge_w_edge: mat(3 * h, rng),
            edge_b1: Tensor::vector(vec![0.0; h]),
            edge_w2: mat(h, rng),
            edge_b2: Tensor::vector(vec![0.0; h]),
            edge_ln_gamma: Tensor::vector(vec![1.0; h]),
            edge_ln_beta: Tensor::vector(vec![0.0; h]),
            node_w_self: mat(2 * h, rng),
            node_w_agg: mat(2 * h, rng),
            node_b1: Tensor::vector(vec![0.0; h]),
            node_w2: mat(h, rng),
            node_b2: Tensor::vector(vec![0.0; h]),
            node_ln_gamma: Tensor::vector(vec![1.0; h]),
            node_ln_beta: Tensor::vector(vec![0.0; h]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (name, t) in self.fields() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 15] {
        [
            ("edge_w_recv", &self.edge_w_recv),
            ("edge_w_send", &self.edge_w_send),
            ("edge_w_edge", &self.edge_w_edge),
            ("edge_b1", &self.edge_b1),
            ("edge_w2", &self.edge_w2),
            ("edge_b2", &self.edge_b2),
            ("edge_ln_gamma", &self.edge_ln_gamma),
            ("edge_ln_beta", &self.edge_ln_beta),
            ("node_w_self", &self.node_w_self),
            ("node_w_agg", &self.node_w_agg),
            ("node_b1", &self.node_b1),
            ("node_w2", &self.node_w2),
            ("node_b2", &self.node_b2),
            ("node_ln_gamma", &self.node_ln_gamma),
            ("node_ln_beta", &self.node_ln_beta),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 15] {
        [
            ("edge_w_recv", &mut self.edge_w_recv),
            ("edge_w_send", &mut self.edge_w_send),
            ("edge_w_edge", &mut self.edge_w_edge),
            ("edge_b1", &mut self.edge_b1),
            ("edge_w2", &mut self.edge_w2),
            ("edge_b2", &mut self.edge_b2),
            ("edge_ln_gamma", &mut self.edge_ln_gamma),
            ("edge_ln_beta", &mut self.edge_ln_beta),
            ("node_w_self", &mut self.node_w_self),
            ("node_w_agg", &mut self.node_w_agg),
            ("node_b1", &mut self.node_b1),
            ("node_w2", &mut self.node_w2),
            ("node_b2", &mut self.node_b2),
            ("node_ln_gamma", &mut self.node_ln_gamma),
            ("node_ln_beta", &mut self.node_ln_beta),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpnParams {
    pub config: MpnConfig,
    pub node_embed: MlpParams,
    pub edge_embed: MlpParams,
    pub blocks: Vec<BlockParams>,
}

impl MpnParams {
    pub fn init(config: MpnConfig, rng: &mut Rng) -> Result<Self> {
        let node_embed = MlpParams::init(&config.embed_spec(config.node_in), rng)?;
        let edge_embed = MlpParams::init(&config.embed_spec(config.edge_in), rng)?;
        let blocks = (0..config.blocks)
            .map(|_| BlockParams::init(config.latent, rng))
            .collect();
        Ok(MpnParams {
            config,
            node_embed,
            edge_embed,
            blocks,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.node_embed.visit(&format!("{prefix}.node_embed"), f);
        self.edge_embed.visit(&format!("{prefix}.edge_embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.node_embed.visit_mut(&format!("{prefix}.node_embed"), f);
        self.edge_embed.visit_mut(&format!("{prefix}.edge_embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.fields_mut() {
                f(format!("{prefix}.block{i}.{name}"), t);
            }
        }
    }
}

/// Tape handles to MPN parameters.
pub struct MpnVars {
    node_embed: MlpVars,
    edge_embed: MlpVars,
    blocks: Vec<Vec<Var>>,
}

impl MpnVars {
    pub fn leaf(tape: &mut Tape, params: &MpnParams) -> Self {
        MpnVars {
            node_embed: MlpVars::leaf(tape, &params.node_embed),
            edge_embed: MlpVars::leaf(tape, &params.edge_embed),
            blocks: params
                .blocks
                .iter()
                .map(|b| b.fields().iter().map(|(_, t)| tape.leaf((*t).clone())).collect())
                .collect(),
        }
    }

    pub fn constant(tape: &mut Tape, params: &MpnParams) -> Self {
        MpnVars {
            node_embed: MlpVars::constant(tape, &params.node_embed),
            edge_embed: MlpVars::constant(tape, &params.edge_embed),
            blocks: params
                .blocks
                .iter()
                .map(|b| {
                    b.fields()
                        .iter()
                        .map(|(_, t)| tape.constant((*t).clone()))
                        .collect()
                })
                .collect(),
        }
    }
}

// indices into the per-block var list, matching BlockParams::fields order
const EDGE_W_RECV: usize = 0;
const EDGE_W_SEND: usize = 1;
const EDGE_W_EDGE: usize = 2;
const EDGE_B1: usize = 3;
const EDGE_W2: usize = 4;
const EDGE_B2: usize = 5;
const EDGE_LN_G: usize = 6;
const EDGE_LN_B: usize = 7;
const NODE_W_SELF: usize = 8;
const NODE_W_AGG: usize = 9;
const NODE_B1: usize = 10;
const NODE_W2: usize = 11;
const NODE_B2: usize = 12;
const NODE_LN_G: usize = 13;
const NODE_LN_B: usize = 14;

/// Runs the MPN on the tape and returns per-node latents `[N, H]`.
pub fn mpn_forward_on_tape(
    tape: &mut Tape,
    config: &MpnConfig,
    vars: &MpnVars,
    node_feats: Var,
    edge_feats: Var,
    send: &Arc<Vec<usize>>,
    recv: &Arc<Vec<usize>>,
    n_nodes: usize,
    repeats: usize,
) -> Result<Var> {
    if repeats < 1 {
        return Err(Error::contract("repeats must be >= 1"));
    }
    if tape.value(node_feats).cols() != config.node_in {
        return Err(Error::contract(format!(
            "node feature width {} != config {}",
            tape.value(node_feats).cols(),
            config.node_in
        )));
    }
    let n_edges = send.len();
    if n_edges > 0 && tape.value(edge_feats).cols() != config.edge_in {
        return Err(Error::contract(format!(
            "edge feature width {} != config {}",
            tape.value(edge_feats).cols(),
            config.edge_in
        )));
    }
    let h_width = config.latent;
    let node_spec = config.embed_spec(config.node_in);
    let edge_spec = config.embed_spec(config.edge_in);

    let mut h = mlp_apply(tape, &node_spec, &vars.node_embed, node_feats, None)?;
    let mut e = if n_edges > 0 {
        Some(mlp_apply(tape, &edge_spec, &vars.edge_embed, edge_feats, None)?)
    } else {
        None
    };

    for block in &vars.blocks {
        for _ in 0..repeats {
            let agg = if let Some(e_cur) = e {
                // edge update: pre = gather(h W_recv, recv) + gather(h W_send, send) + e W_e + b
                let hr = tape.matmul(h, block[EDGE_W_RECV])?;
                let hs = tape.matmul(h, block[EDGE_W_SEND])?;
                let gr = tape.gather_rows(hr, recv.clone())?;
                let gs = tape.gather_rows(hs, send.clone())?;
                let ee = tape.matmul(e_cur, block[EDGE_W_EDGE])?;
                let mut pre = tape.add(gr, gs)?;
                pre = tape.add(pre, ee)?;
                pre = tape.add_row(pre, block[EDGE_B1])?;
                let hidden = tape.leaky_relu(pre, LEAKY_SLOPE)?;
                let mut out = tape.matmul(hidden, block[EDGE_W2])?;
                out = tape.add_row(out, block[EDGE_B2])?;
                let res = tape.add(out, e_cur)?;
                let e_new = tape.layer_norm(res, block[EDGE_LN_G], block[EDGE_LN_B], LN_EPS)?;
                e = Some(e_new);
                tape.segment_mean(e_new, recv.clone(), n_nodes)?
            } else {
                tape.constant(Tensor::zeros(&[n_nodes, h_width]))
            };
            let hv = tape.matmul(h, block[NODE_W_SELF])?;
            let ha = tape.matmul(agg, block[NODE_W_AGG])?;
            let mut pre = tape.add(hv, ha)?;
            pre = tape.add_row(pre, block[NODE_B1])?;
            let hidden = tape.leaky_relu(pre, LEAKY_SLOPE)?;
            let mut out = tape.matmul(hidden, block[NODE_W2])?;
            out = tape.add_row(out, block[NODE_B2])?;
            let res = tape.add(out, h)?;
            h = tape.layer_norm(res, block[NODE_LN_G], block[NODE_LN_B], LN_EPS)?;
        }
    }
    Ok(h)
}

/// Plain forward pass over a mesh graph: per-node latents `[N, H]`.
pub fn mpn_forward(params: &MpnParams, graph: &MeshGraph, repeats: usize) -> Result<Tensor> {
    mpn_forward_with_features(
        params,
        &graph.node_features(None),
        &graph.initial_edge_features()?,
        &graph.send,
        &graph.recv,
        graph.n_nodes(),
        repeats,
    )
}

pub fn mpn_forward_with_features(
    params: &MpnParams,
    node_feats: &Tensor,
    edge_feats: &Tensor,
    send: &Arc<Vec<usize>>,
    recv: &Arc<Vec<usize>>,
    n_nodes: usize,
    repeats: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = MpnVars::constant(&mut tape, params);
    let nf = tape.constant(node_feats.clone());
    let ef = tape.constant(edge_feats.clone());
    let out = mpn_forward_on_tape(
        &mut tape,
        &params.config,
        &vars,
        nf,
        ef,
        send,
        recv,
        n_nodes,
        repeats,
    )?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, ObjectMesh};
    use crate::rng;

    fn far_collider() -> ObjectMesh {
        ObjectMesh::new(Tensor::matrix(1, 2, vec![50.0, 50.0]).unwrap(), vec![])
    }

    fn chain(n: usize, offset: f64) -> ObjectMesh {
        let pos: Vec<f64> = (0..n).flat_map(|i| [i as f64 * 0.25 + offset, 0.0]).collect();
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        ObjectMesh::new(Tensor::matrix(n, 2, pos).unwrap(), edges)
    }

    fn small_params(node_in: usize, latent: usize, blocks: usize, seed: u64) -> MpnParams {
        let mut r = rng::derive(&[seed]);
        MpnParams::init(MpnConfig::new(node_in, 6, latent, blocks), &mut r).unwrap()
    }

    #[test]
    fn isolated_node_gets_zero_aggregation() {
        // Two deformable nodes with no mesh edges and a far collider: no edges
        // at all; the node update still applies on zero aggregation.
        let plate = ObjectMesh::new(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap(), vec![]);
        let g = build_graph(&plate, &far_collider(), 0.3).unwrap();
        assert_eq!(g.n_edges(), 0);
        let params = small_params(2, 16, 2, 3);
        let h = mpn_forward(&params, &g, 1).unwrap();
        assert_eq!(h.shape(), &[3, 16]);
        assert!(h.all_finite());
        // identical features + zero aggregation => identical outputs
        assert_eq!(h.row_slice(0), h.row_slice(1));
    }

    #[test]
    fn permutation_equivariance_within_tolerance() {
        use rand::seq::SliceRandom;
        use rand::Rng as _;
        let mut r = rng::derive(&[77]);
        for round in 0..10 {
            let n = 6;
            let pos: Vec<f64> = (0..n * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
            let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)];
            let plate = ObjectMesh::new(Tensor::matrix(n, 2, pos.clone()).unwrap(), edges.clone());
            let g = build_graph(&plate, &far_collider(), 0.3).unwrap();
            let params = small_params(2, 24, 3, 100 + round);
            let h = mpn_forward(&params, &g, 2).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            // permuted object: node perm[i] of the new mesh is node i of the old
            let mut new_pos = vec![0.0; n * 2];
            for i in 0..n {
                new_pos[perm[i] * 2] = pos[i * 2];
                new_pos[perm[i] * 2 + 1] = pos[i * 2 + 1];
            }
            let new_edges: Vec<(usize, usize)> =
                edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let plate_p = ObjectMesh::new(Tensor::matrix(n, 2, new_pos).unwrap(), new_edges);
            let gp = build_graph(&plate_p, &far_collider(), 0.3).unwrap();
            let hp = mpn_forward(&params, &gp, 2).unwrap();

            for i in 0..n {
                for k in 0..24 {
                    let a = h.get2(i, k);
                    let b = hp.get2(perm[i], k);
                    assert!((a - b).abs() <= 1e-12, "node {i} lane {k}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn receptive_field_bounded_by_blocks_times_repeats() {
        let n = 12;
        let params = small_params(2, 16, 5, 9);
        let base = chain(n, 0.0);
        let g = build_graph(&base, &far_collider(), 0.1).unwrap();
        let h0 = mpn_forward(&params, &g, 1).unwrap();

        // perturb node 0's position: only edge (0,1) features change
        let mut pos = g.positions.clone();
        let v = pos.get2(0, 1) + 0.05;
        pos.set2(0, 1, v);
        let h1 = mpn_forward_with_features(
            &params,
            &g.node_features(None),
            &g.edge_features(&pos).unwrap(),
            &g.send,
            &g.recv,
            g.n_nodes(),
            1,
        )
        .unwrap();

        // 5 blocks x 1 repeat: nodes within graph distance 5 may change,
        // nodes beyond must be bitwise identical.
        for i in 6..n {
            assert_eq!(h0.row_slice(i), h1.row_slice(i), "node {i} leaked influence");
        }
        assert_ne!(h0.row_slice(0), h1.row_slice(0));
        assert_ne!(h0.row_slice(1), h1.row_slice(1));
    }

    #[test]
    fn isomorphic_components_produce_identical_outputs() {
        // two identical disconnected chains; translation-invariant features
        // make their inputs identical, so per-node outputs match exactly.
        let mut pos: Vec<f64> = Vec::new();
        let n = 4;
        for i in 0..n {
            pos.extend([i as f64 * 0.25, 0.0]);
        }
        for i in 0..n {
            pos.extend([i as f64 * 0.25 + 8.0, 0.0]);
        }
        let edges = vec![(0, 1), (1, 2), (2, 3), (4, 5), (5, 6), (6, 7)];
        let plate = ObjectMesh::new(Tensor::matrix(2 * n, 2, pos).unwrap(), edges);
        let g = build_graph(&plate, &far_collider(), 0.1).unwrap();
        let params = small_params(2, 16, 3, 21);
        let h = mpn_forward(&params, &g, 2).unwrap();
        for i in 0..n {
            assert_eq!(h.row_slice(i), h.row_slice(i + n), "node {i}");
        }
    }

    #[test]
    fn zero_repeats_is_contract_violation() {
        let plate = chain(3, 0.0);
        let g = build_graph(&plate, &far_collider(), 0.1).unwrap();
        let params = small_params(2, 8, 2, 5);
        assert!(matches!(
            mpn_forward(&params, &g, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn feature_width_mismatch_is_contract_violation() {
        let plate = chain(3, 0.0);
        let g = build_graph(&plate, &far_collider(), 0.1).unwrap();
        // params expect material-extended node features (width 3)
        let params = small_params(3, 8, 2, 6);
        assert!(matches!(
            mpn_forward(&params, &g, 1),
            Err(Error::Contract(_))
        ));
    }
}
