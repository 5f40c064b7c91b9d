//! Mesh graphs: node kinds, proximity-based connection of deformable object
//! and collider, and relative-distance edge features.
//!
//! Node ordering is deformable-first, collider-after. The directed edge list
//! is canonically sorted by (receiver, sender) so aggregation order is
//! deterministic. Proximity edges are computed once at construction and stay
//! fixed for the trajectory; only feature values are recomputed when node
//! positions move.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Deformable,
    Collider,
}

/// One object's mesh: positions, unique undirected edges, reference
/// (undeformed) positions, and optional triangles for surface sampling.
#[derive(Debug, Clone)]
pub struct ObjectMesh {
    pub positions: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub ref_positions: Tensor,
    pub triangles: Vec<[usize; 3]>,
}

impl ObjectMesh {
    pub fn new(positions: Tensor, edges: Vec<(usize, usize)>) -> Self {
        let ref_positions = positions.clone();
        ObjectMesh {
            positions,
            edges,
            ref_positions,
            triangles: Vec::new(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.rows()
    }
}

#[derive(Debug, Clone)]
pub struct MeshGraph {
    pub n_deformable: usize,
    pub n_collider: usize,
    pub dim: usize,
    pub radius: f64,
    /// Node positions at construction time (N x D).
    pub positions: Tensor,
    pub kinds: Vec<NodeKind>,
    /// Directed edges in canonical (receiver, sender) order.
    pub send: Arc<Vec<usize>>,
    pub recv: Arc<Vec<usize>>,
    pub is_mesh_edge: Vec<bool>,
    /// Unique undirected pairs, for serialization and brute-force checks.
    pub mesh_pairs: Vec<(usize, usize)>,
    pub prox_pairs: Vec<(usize, usize)>,
    /// Reference positions for mesh-space feature slots (N x D).
    pub ref_positions: Tensor,
    /// Deformable-surface triangles (indices into deformable nodes).
    pub triangles: Vec<[usize; 3]>,
}

impl MeshGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_deformable + self.n_collider
    }

    pub fn n_edges(&self) -> usize {
        self.send.len()
    }

    /// Per-edge feature width: world displacement + norm, duplicated for
    /// mesh space.
    pub fn edge_feature_width(&self) -> usize {
        2 * (self.dim + 1)
    }

    /// Encodes per-edge features from the given node positions: each directed
    /// edge (u -> v) carries `[x_v - x_u, |x_v - x_u|]` in world space and,
    /// for mesh edges, the same quantities from the reference positions.
    /// Proximity edges carry zeros in the mesh-space slots.
    pub fn edge_features(&self, positions: &Tensor) -> Result<Tensor> {
        if positions.shape() != self.positions.shape() {
            return Err(Error::contract(format!(
                "edge_features: positions shape {:?}, expected {:?}",
                positions.shape(),
                self.positions.shape()
            )));
        }
        let d = self.dim;
        let width = self.edge_feature_width();
        let e = self.send.len();
        let mut data = vec![0.0; e * width];
        for i in 0..e {
            let (u, v) = (self.send[i], self.recv[i]);
            let pu = positions.row_slice(u);
            let pv = positions.row_slice(v);
            let row = &mut data[i * width..(i + 1) * width];
            let mut norm = 0.0;
            for k in 0..d {
                let dx = pv[k] - pu[k];
                row[k] = dx;
                norm += dx * dx;
            }
            row[d] = norm.sqrt();
            if self.is_mesh_edge[i] {
                let ru = self.ref_positions.row_slice(u);
                let rv = self.ref_positions.row_slice(v);
                let mut mnorm = 0.0;
                for k in 0..d {
                    let dx = rv[k] - ru[k];
                    row[d + 1 + k] = dx;
                    mnorm += dx * dx;
                }
                row[2 * d + 1] = mnorm.sqrt();
            }
        }
        Ok(Tensor::from_parts(vec![e, width], data))
    }

    /// Initial-position edge features.
    pub fn initial_edge_features(&self) -> Result<Tensor> {
        self.edge_features(&self.positions)
    }

    /// One-hot node-kind features, optionally extended with a material scalar
    /// on deformable rows (collider rows carry zero there).
    pub fn node_features(&self, material: Option<f64>) -> Tensor {
        let n = self.n_nodes();
        let width = if material.is_some() { 3 } else { 2 };
        let mut data = vec![0.0; n * width];
        for (i, kind) in self.kinds.iter().enumerate() {
            match kind {
                NodeKind::Deformable => {
                    data[i * width] = 1.0;
                    if let Some(m) = material {
                        data[i * width + 2] = m;
                    }
                }
                NodeKind::Collider => data[i * width + 1] = 1.0,
            }
        }
        Tensor::from_parts(vec![n, width], data)
    }

    /// Rebuilds the same topology with different node positions (features are
    /// derived on demand; proximity connectivity stays fixed).
    pub fn with_positions(&self, positions: Tensor) -> Result<MeshGraph> {
        if positions.shape() != self.positions.shape() {
            return Err(Error::contract(format!(
                "with_positions: shape {:?}, expected {:?}",
                positions.shape(),
                self.positions.shape()
            )));
        }
        let mut g = self.clone();
        g.positions = positions;
        Ok(g)
    }
}

/// Connects a deformable mesh and a collider mesh: all mesh edges of both
/// objects plus cross-object proximity edges for pairs within `radius`, each
/// undirected adjacency materialized as two directed edges.
pub fn build_graph(deformable: &ObjectMesh, collider: &ObjectMesh, radius: f64) -> Result<MeshGraph> {
    if radius <= 0.0 {
        return Err(Error::contract(format!("radius must be positive, got {radius}")));
    }
    if deformable.n_nodes() == 0 || collider.n_nodes() == 0 {
        return Err(Error::contract("empty node set"));
    }
    if !deformable.positions.all_finite() || !collider.positions.all_finite() {
        return Err(Error::numeric("build_graph", "non-finite positions"));
    }
    let nd = deformable.n_nodes();
    let nc = collider.n_nodes();
    let d = deformable.positions.cols();
    if collider.positions.cols() != d {
        return Err(Error::contract("mismatched world dimension"));
    }

    let mut positions = Vec::with_capacity((nd + nc) * d);
    positions.extend_from_slice(deformable.positions.data());
    positions.extend_from_slice(collider.positions.data());
    let positions = Tensor::from_parts(vec![nd + nc, d], positions);

    let mut refs = Vec::with_capacity((nd + nc) * d);
    refs.extend_from_slice(deformable.ref_positions.data());
    refs.extend_from_slice(collider.ref_positions.data());
    let ref_positions = Tensor::from_parts(vec![nd + nc, d], refs);

    let mut kinds = vec![NodeKind::Deformable; nd];
    kinds.extend(vec![NodeKind::Collider; nc]);

    let check_pair = |a: usize, b: usize, n: usize| -> Result<()> {
        if a >= n || b >= n || a == b {
            return Err(Error::contract(format!("invalid mesh edge ({a}, {b})")));
        }
        Ok(())
    };

    let mut mesh_pairs = Vec::new();
    for &(a, b) in &deformable.edges {
        check_pair(a, b, nd)?;
        mesh_pairs.push((a, b));
    }
    for &(a, b) in &collider.edges {
        check_pair(a, b, nc)?;
        mesh_pairs.push((a + nd, b + nd));
    }

    let mut prox_pairs = Vec::new();
    for i in 0..nd {
        let pi = positions.row_slice(i);
        for j in 0..nc {
            let pj = positions.row_slice(nd + j);
            let dist2: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist2.sqrt() <= radius {
                prox_pairs.push((i, nd + j));
            }
        }
    }

    let mut directed: Vec<(usize, usize, bool)> = Vec::with_capacity(2 * (mesh_pairs.len() + prox_pairs.len()));
    for &(a, b) in &mesh_pairs {
        directed.push((a, b, true));
        directed.push((b, a, true));
    }
    for &(a, b) in &prox_pairs {
        directed.push((a, b, false));
        directed.push((b, a, false));
    }
    // canonical order: by (receiver, sender)
    directed.sort_by_key(|&(s, r, _)| (r, s));

    let send = Arc::new(directed.iter().map(|&(s, _, _)| s).collect::<Vec<_>>());
    let recv = Arc::new(directed.iter().map(|&(_, r, _)| r).collect::<Vec<_>>());
    let is_mesh_edge = directed.iter().map(|&(_, _, m)| m).collect();

    Ok(MeshGraph {
        n_deformable: nd,
        n_collider: nc,
        dim: d,
        radius,
        positions,
        kinds,
        send,
        recv,
        is_mesh_edge,
        mesh_pairs,
        prox_pairs,
        ref_positions,
        triangles: deformable.triangles.clone(),
    })
}
