//! Simulation tasks: one trajectory with its initial graph, timesteps,
//! node-position targets, prescribed collider motion, and the hidden material
//! scalar (stored for the material-informed baseline and diagnostics only).

use crate::error::{Error, Result};
use crate::graph::MeshGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Task {
    pub id: u64,
    pub seed: u64,
    /// Initial system graph at time zero.
    pub graph: MeshGraph,
    /// Normalized timesteps in (0, 1], one per target step.
    pub times: Vec<f64>,
    /// Node positions per step, `[T, N, D]`; collider rows follow the signal.
    pub targets: Tensor,
    /// Collider positions per step, `[T, Nc, D]`.
    pub collider_signal: Tensor,
    /// Hidden stiffness scale (the unobserved material property).
    pub kappa: f64,
}

impl Task {
    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::contract("task must have at least one step"));
        }
        if !self.targets.all_finite() {
            return Err(Error::numeric("task", "non-finite targets"));
        }
        let shape = self.targets.shape();
        if shape != [self.n_steps(), self.graph.n_nodes(), self.graph.dim] {
            return Err(Error::contract(format!(
                "targets shape {shape:?} does not match graph/time extents"
            )));
        }
        if self.targets.data().iter().any(|v| v.abs() > 1.0)
            || self.graph.positions.data().iter().any(|v| v.abs() > 1.0)
        {
            return Err(Error::contract("positions outside the normalized scene bound"));
        }
        Ok(())
    }

    /// Positions of all nodes at step `t` as `[N, D]`.
    pub fn positions_at(&self, t: usize) -> Tensor {
        let n = self.graph.n_nodes();
        let d = self.graph.dim;
        let start = t * n * d;
        Tensor::from_parts(vec![n, d], self.targets.data()[start..start + n * d].to_vec())
    }

    /// Context targets `[C, N, D]` for the given step indices.
    pub fn targets_for_steps(&self, steps: &[usize]) -> Tensor {
        let n = self.graph.n_nodes();
        let d = self.graph.dim;
        let mut data = Vec::with_capacity(steps.len() * n * d);
        for &s in steps {
            let start = s * n * d;
            data.extend_from_slice(&self.targets.data()[start..start + n * d]);
        }
        Tensor::from_parts(vec![steps.len(), n, d], data)
    }
}
