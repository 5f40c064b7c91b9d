//! Synthetic deformable-object benchmark with oracle ground truth.
//!
//! A mass-spring plate (structural + shear springs, stiffness scaled by a
//! hidden per-task factor, fixed bottom boundary) is deformed by a rigid
//! circular collider moving at constant velocity. Integration is semi-implicit
//! Euler at a fine internal step with stiffness-proportional spring-axis
//! damping, which keeps per-step mechanical energy non-increasing; contact is
//! position projection out of the circle. A 3-D variant drags a gripper node
//! attached to a small lattice along a random constant-velocity line.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, ObjectMesh};
use crate::rng::{self, Rng};
use crate::task::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SceneKind {
    Plate2d,
    Tissue3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    /// Plate grid resolution (nodes per side); the 3-D variant uses a cubic
    /// lattice of `grid_nx` per side.
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Bottom/top half-width sampling ranges of the trapezoid.
    pub bottom_half_width: (f64, f64),
    pub top_half_width: (f64, f64),
    pub plate_height: f64,
    pub collider_radius: (f64, f64),
    pub collider_start_x: (f64, f64),
    pub collider_start_y: (f64, f64),
    /// Constant collider velocity (world units per normalized trajectory).
    pub collider_velocity: (f64, f64),
    /// Output steps per trajectory.
    pub timesteps: usize,
    /// Fine integration steps per output step.
    pub substeps: usize,
    /// Stiffness-proportional spring-axis damping coefficient.
    pub damping: f64,
    /// Hidden stiffness scale range.
    pub kappa: (f64, f64),
    pub base_stiffness: f64,
    pub node_mass: f64,
    /// Proximity connection radius for graph construction.
    pub connection_radius: f64,
    /// Collider ring discretization for the graph.
    pub collider_segments: usize,
}

impl SceneSpec {
    pub fn plate_default() -> Self {
        SceneSpec {
            kind: SceneKind::Plate2d,
            grid_nx: 9,
            grid_ny: 9,
            bottom_half_width: (0.35, 0.5),
            top_half_width: (0.2, 0.45),
            plate_height: 0.8,
            collider_radius: (0.08, 0.16),
            collider_start_x: (-0.25, 0.25),
            collider_start_y: (0.35, 0.5),
            collider_velocity: (0.0, -0.55),
            timesteps: 50,
            substeps: 20,
            damping: 0.2,
            kappa: (0.5, 2.0),
            base_stiffness: 150.0,
            node_mass: 1.0,
            connection_radius: 0.3,
            collider_segments: 12,
        }
    }

    pub fn tissue_default() -> Self {
        SceneSpec {
            kind: SceneKind::Tissue3d,
            grid_nx: 4,
            grid_ny: 4,
            bottom_half_width: (0.3, 0.3),
            top_half_width: (0.3, 0.3),
            plate_height: 0.6,
            collider_radius: (0.0, 0.0),
            collider_start_x: (0.0, 0.0),
            collider_start_y: (0.0, 0.0),
            collider_velocity: (0.0, 0.0),
            timesteps: 100,
            substeps: 20,
            damping: 0.2,
            kappa: (0.5, 2.0),
            base_stiffness: 150.0,
            node_mass: 1.0,
            connection_radius: 0.3,
            collider_segments: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_nx < 2 || self.grid_ny < 2 {
            return Err(Error::contract("grid resolution must be at least 2x2"));
        }
        if self.kappa.0 <= 0.0 || self.kappa.1 < self.kappa.0 {
            return Err(Error::contract("kappa range must be positive and ordered"));
        }
        if self.timesteps < 1 || self.substeps < 1 {
            return Err(Error::contract("timesteps and substeps must be >= 1"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            SceneKind::Plate2d => 2,
            SceneKind::Tissue3d => 3,
        }
    }
}

/// Internal damped mass-spring integrator.
pub(crate) struct SpringSystem {
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
    pub dim: usize,
    /// (a, b, rest length, stiffness)
    pub springs: Vec<(usize, usize, f64, f64)>,
    pub fixed: Vec<bool>,
    pub mass: f64,
    /// Stiffness-proportional spring-axis damping.
    pub damping: f64,
}

impl SpringSystem {
    fn n(&self) -> usize {
        self.pos.len() / self.dim
    }

    /// Total mechanical energy: kinetic plus spring potential.
    pub(crate) fn energy(&self) -> f64 {
        let d = self.dim;
        let mut e = 0.0;
        for i in 0..self.n() {
            let v = &self.vel[i * d..(i + 1) * d];
            e += 0.5 * self.mass * v.iter().map(|x| x * x).sum::<f64>();
        }
        for &(a, b, rest, k) in &self.springs {
            let mut len2 = 0.0;
            for t in 0..d {
                let dx = self.pos[b * d + t] - self.pos[a * d + t];
                len2 += dx * dx;
            }
            let stretch = len2.sqrt() - rest;
            e += 0.5 * k * stretch * stretch;
        }
        e
    }

    /// One semi-implicit Euler substep. Spring force on `a` from spring
    /// (a, b): `k (len - rest) dir + damping k (v_rel . dir) dir` pulling a
    /// toward b when stretched.
    pub(crate) fn step(&mut self, dt: f64) {
        let d = self.dim;
        let n = self.n();
        let mut force = vec![0.0; n * d];
        for &(a, b, rest, k) in &self.springs {
            let mut dir = [0.0f64; 3];
            let mut len2 = 0.0;
            for t in 0..d {
                dir[t] = self.pos[b * d + t] - self.pos[a * d + t];
                len2 += dir[t] * dir[t];
            }
            let len = len2.sqrt().max(1e-12);
            for t in 0..d {
                dir[t] /= len;
            }
            let stretch = len - rest;
            let mut vrel = 0.0;
            for t in 0..d {
                vrel += (self.vel[b * d + t] - self.vel[a * d + t]) * dir[t];
            }
            let f = k * stretch + self.damping * k * vrel;
            for t in 0..d {
                force[a * d + t] += f * dir[t];
                force[b * d + t] -= f * dir[t];
            }
        }
        for i in 0..n {
            if self.fixed[i] {
                for t in 0..d {
                    self.vel[i * d + t] = 0.0;
                }
                continue;
            }
            for t in 0..d {
                self.vel[i * d + t] += dt * force[i * d + t] / self.mass;
                self.pos[i * d + t] += dt * self.vel[i * d + t];
            }
        }
    }

    /// Projects penetrating nodes out of a moving circle and removes inward
    /// relative normal velocity.
    fn resolve_circle_contact(&mut self, center: (f64, f64), radius: f64, col_vel: (f64, f64)) {
        debug_assert_eq!(self.dim, 2);
        for i in 0..self.n() {
            if self.fixed[i] {
                continue;
            }
            let dx = self.pos[i * 2] - center.0;
            let dy = self.pos[i * 2 + 1] - center.1;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < radius {
                let (nx, ny) = if dist > 1e-12 {
                    (dx / dist, dy / dist)
                } else {
                    (0.0, 1.0)
                };
                self.pos[i * 2] = center.0 + radius * nx;
                self.pos[i * 2 + 1] = center.1 + radius * ny;
                let vn = (self.vel[i * 2] - col_vel.0) * nx + (self.vel[i * 2 + 1] - col_vel.1) * ny;
                if vn < 0.0 {
                    self.vel[i * 2] -= vn * nx;
                    self.vel[i * 2 + 1] -= vn * ny;
                }
            }
        }
    }
}

struct PlateGeometry {
    positions: Vec<f64>,
    edges: Vec<(usize, usize)>,
    shear: Vec<(usize, usize)>,
    triangles: Vec<[usize; 3]>,
    fixed: Vec<bool>,
}

fn trapezoid_plate(spec: &SceneSpec, wb: f64, wt: f64) -> PlateGeometry {
    let (nx, ny) = (spec.grid_nx, spec.grid_ny);
    let y0 = -0.8;
    let mut positions = Vec::with_capacity(nx * ny * 2);
    for j in 0..ny {
        let frac = j as f64 / (ny - 1) as f64;
        let y = y0 + spec.plate_height * frac;
        let w = wb + (wt - wb) * frac;
        for i in 0..nx {
            let x = -w + 2.0 * w * i as f64 / (nx - 1) as f64;
            positions.push(x);
            positions.push(y);
        }
    }
    let idx = |i: usize, j: usize| j * nx + i;
    let mut edges = Vec::new();
    let mut shear = Vec::new();
    let mut triangles = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                edges.push((idx(i, j), idx(i + 1, j)));
            }
            if j + 1 < ny {
                edges.push((idx(i, j), idx(i, j + 1)));
            }
            if i + 1 < nx && j + 1 < ny {
                shear.push((idx(i, j), idx(i + 1, j + 1)));
                shear.push((idx(i + 1, j), idx(i, j + 1)));
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
    }
    let mut fixed = vec![false; nx * ny];
    for i in 0..nx {
        fixed[idx(i, 0)] = true;
    }
    PlateGeometry {
        positions,
        edges,
        shear,
        triangles,
        fixed,
    }
}

fn circle_mesh(center: (f64, f64), radius: f64, segments: usize) -> ObjectMesh {
    let mut pos = Vec::with_capacity(segments * 2);
    for s in 0..segments {
        let a = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
        pos.push(center.0 + radius * a.cos());
        pos.push(center.1 + radius * a.sin());
    }
    let edges = (0..segments).map(|s| (s, (s + 1) % segments)).collect();
    ObjectMesh::new(Tensor::from_parts(vec![segments, 2], pos), edges)
}

fn spring_lengths(positions: &[f64], dim: usize, pairs: &[(usize, usize)], k: f64) -> Vec<(usize, usize, f64, f64)> {
    pairs
        .iter()
        .map(|&(a, b)| {
            let mut len2 = 0.0;
            for t in 0..dim {
                let dx = positions[b * dim + t] - positions[a * dim + t];
                len2 += dx * dx;
            }
            (a, b, len2.sqrt(), k)
        })
        .collect()
}

/// Generates one task with the hidden stiffness drawn from the configured
/// range. The rng stream is consumed identically regardless of the override,
/// so a fixed seed yields identical geometry for any forced kappa.
pub fn generate_task_with_kappa(spec: &SceneSpec, seed: u64, kappa_override: Option<f64>) -> Result<Task> {
    spec.validate()?;
    let mut r = rng::derive(&[rng::label("task-gen"), seed]);
    match spec.kind {
        SceneKind::Plate2d => generate_plate(spec, seed, kappa_override, &mut r),
        SceneKind::Tissue3d => generate_tissue(spec, seed, kappa_override, &mut r),
    }
}

pub fn generate_task(spec: &SceneSpec, seed: u64) -> Result<Task> {
    generate_task_with_kappa(spec, seed, None)
}

fn generate_plate(spec: &SceneSpec, seed: u64, kappa_override: Option<f64>, r: &mut Rng) -> Result<Task> {
    let wb = r.gen_range(spec.bottom_half_width.0..=spec.bottom_half_width.1);
    let wt = r.gen_range(spec.top_half_width.0..=spec.top_half_width.1);
    let radius = r.gen_range(spec.collider_radius.0..=spec.collider_radius.1);
    let cx = r.gen_range(spec.collider_start_x.0..=spec.collider_start_x.1);
    let cy = r.gen_range(spec.collider_start_y.0..=spec.collider_start_y.1);
    let kappa_drawn = r.gen_range(spec.kappa.0..=spec.kappa.1);
    let kappa = kappa_override.unwrap_or(kappa_drawn);

    let geo = trapezoid_plate(spec, wb, wt);
    let k = spec.base_stiffness * kappa;
    let mut springs = spring_lengths(&geo.positions, 2, &geo.edges, k);
    springs.extend(spring_lengths(&geo.positions, 2, &geo.shear, k));

    let mut system = SpringSystem {
        pos: geo.positions.clone(),
        vel: vec![0.0; geo.positions.len()],
        dim: 2,
        springs,
        fixed: geo.fixed.clone(),
        mass: spec.node_mass,
        damping: spec.damping,
    };

    let t_total = 1.0;
    let dt = t_total / (spec.timesteps * spec.substeps) as f64;
    let nd = spec.grid_nx * spec.grid_ny;
    let nc = spec.collider_segments;
    let n = nd + nc;
    let mut targets = vec![0.0; spec.timesteps * n * 2];
    let mut signal = vec![0.0; spec.timesteps * nc * 2];

    let collider0 = circle_mesh((cx, cy), radius, nc);
    let mut elapsed = 0.0;
    for step in 0..spec.timesteps {
        for _ in 0..spec.substeps {
            system.step(dt);
            elapsed += dt;
            let center = (
                cx + spec.collider_velocity.0 * elapsed,
                cy + spec.collider_velocity.1 * elapsed,
            );
            system.resolve_circle_contact(center, radius, spec.collider_velocity);
        }
        if !system.pos.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(
                "generate_task",
                format!("simulation blow-up at step {step} (seed {seed})"),
            ));
        }
        let center = (
            cx + spec.collider_velocity.0 * elapsed,
            cy + spec.collider_velocity.1 * elapsed,
        );
        for node in 0..nd {
            targets[(step * n + node) * 2] = system.pos[node * 2];
            targets[(step * n + node) * 2 + 1] = system.pos[node * 2 + 1];
        }
        for s in 0..nc {
            let a = 2.0 * std::f64::consts::PI * s as f64 / nc as f64;
            let px = center.0 + radius * a.cos();
            let py = center.1 + radius * a.sin();
            targets[(step * n + nd + s) * 2] = px;
            targets[(step * n + nd + s) * 2 + 1] = py;
            signal[(step * nc + s) * 2] = px;
            signal[(step * nc + s) * 2 + 1] = py;
        }
    }

    let mut plate_mesh = ObjectMesh::new(
        Tensor::from_parts(vec![nd, 2], geo.positions.clone()),
        geo.edges.clone(),
    );
    plate_mesh.triangles = geo.triangles.clone();
    let graph = build_graph(&plate_mesh, &collider0, spec.connection_radius)?;

    let task = Task {
        id: seed,
        seed,
        graph,
        times: (1..=spec.timesteps)
            .map(|t| t as f64 / spec.timesteps as f64)
            .collect(),
        targets: Tensor::new(vec![spec.timesteps, n, 2], targets)
            .map_err(|_| Error::numeric("generate_task", format!("non-finite output (seed {seed})")))?,
        collider_signal: Tensor::from_parts(vec![spec.timesteps, nc, 2], signal),
        kappa,
    };
    task.validate()?;
    Ok(task)
}

fn generate_tissue(spec: &SceneSpec, seed: u64, kappa_override: Option<f64>, r: &mut Rng) -> Result<Task> {
    let g = spec.grid_nx;
    let dim = 3;
    // cubic lattice centered near the origin, resting on a fixed bottom layer
    let spacing = 0.6 / (g - 1) as f64;
    let origin = -0.3;
    let mut positions = Vec::with_capacity(g * g * g * 3);
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                positions.push(origin + x as f64 * spacing);
                positions.push(origin + y as f64 * spacing);
                positions.push(-0.5 + z as f64 * spacing);
            }
        }
    }
    let idx = |x: usize, y: usize, z: usize| (z * g + y) * g + x;
    let mut edges = Vec::new();
    let mut shear = Vec::new();
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                if x + 1 < g {
                    edges.push((idx(x, y, z), idx(x + 1, y, z)));
                }
                if y + 1 < g {
                    edges.push((idx(x, y, z), idx(x, y + 1, z)));
                }
                if z + 1 < g {
                    edges.push((idx(x, y, z), idx(x, y, z + 1)));
                }
                if x + 1 < g && y + 1 < g {
                    shear.push((idx(x, y, z), idx(x + 1, y + 1, z)));
                    shear.push((idx(x + 1, y, z), idx(x, y + 1, z)));
                }
                if x + 1 < g && z + 1 < g {
                    shear.push((idx(x, y, z), idx(x + 1, y, z + 1)));
                    shear.push((idx(x + 1, y, z), idx(x, y, z + 1)));
                }
                if y + 1 < g && z + 1 < g {
                    shear.push((idx(x, y, z), idx(x, y + 1, z + 1)));
                    shear.push((idx(x, y + 1, z), idx(x, y, z + 1)));
                }
            }
        }
    }
    let nd = g * g * g;
    let kappa_drawn = r.gen_range(spec.kappa.0..=spec.kappa.1);
    let kappa = kappa_override.unwrap_or(kappa_drawn);
    // gripper grabs a random top-layer node and drags it along a random line
    let gx = r.gen_range(0..g);
    let gy = r.gen_range(0..g);
    let grabbed = idx(gx, gy, g - 1);
    let dir = {
        let theta = r.gen_range(0.0..std::f64::consts::TAU);
        let up: f64 = r.gen_range(0.1..0.5);
        let norm = (1.0 + up * up).sqrt();
        [theta.cos() / norm, theta.sin() / norm, up / norm]
    };
    let travel = 0.25;

    let mut fixed = vec![false; nd];
    for y in 0..g {
        for x in 0..g {
            fixed[idx(x, y, 0)] = true;
        }
    }
    fixed[grabbed] = true; // position driven by the gripper

    let k = spec.base_stiffness * kappa;
    let mut springs = spring_lengths(&positions, 3, &edges, k);
    springs.extend(spring_lengths(&positions, 3, &shear, k));
    let mut system = SpringSystem {
        pos: positions.clone(),
        vel: vec![0.0; positions.len()],
        dim: 3,
        springs,
        fixed,
        mass: spec.node_mass,
        damping: spec.damping,
    };

    let grip_start = [
        positions[grabbed * 3],
        positions[grabbed * 3 + 1],
        positions[grabbed * 3 + 2],
    ];
    let nc = 1;
    let n = nd + nc;
    let dt = 1.0 / (spec.timesteps * spec.substeps) as f64;
    let mut targets = vec![0.0; spec.timesteps * n * 3];
    let mut signal = vec![0.0; spec.timesteps * nc * 3];
    let mut elapsed = 0.0;
    for step in 0..spec.timesteps {
        for _ in 0..spec.substeps {
            elapsed += dt;
            for t in 0..3 {
                system.pos[grabbed * 3 + t] = grip_start[t] + dir[t] * travel * elapsed;
            }
            system.step(dt);
        }
        if !system.pos.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(
                "generate_task",
                format!("simulation blow-up at step {step} (seed {seed})"),
            ));
        }
        for node in 0..nd {
            for t in 0..3 {
                targets[(step * n + node) * 3 + t] = system.pos[node * 3 + t];
            }
        }
        for t in 0..3 {
            let v = grip_start[t] + dir[t] * travel * elapsed;
            targets[(step * n + nd) * 3 + t] = v;
            signal[step * 3 + t] = v;
        }
    }

    let plate_mesh = ObjectMesh::new(Tensor::from_parts(vec![nd, dim], positions), edges);
    let gripper = ObjectMesh::new(
        Tensor::from_parts(vec![1, 3], grip_start.to_vec()),
        vec![],
    );
    let graph = build_graph(&plate_mesh, &gripper, spec.connection_radius)?;
    let task = Task {
        id: seed,
        seed,
        graph,
        times: (1..=spec.timesteps)
            .map(|t| t as f64 / spec.timesteps as f64)
            .collect(),
        targets: Tensor::new(vec![spec.timesteps, n, 3], targets)
            .map_err(|_| Error::numeric("generate_task", format!("non-finite output (seed {seed})")))?,
        collider_signal: Tensor::from_parts(vec![spec.timesteps, nc, 3], signal),
        kappa,
    };
    task.validate()?;
    Ok(task)
}

/// Point sampling strategy over the deformed surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSampling {
    /// Uniform barycentric sampling over surface elements.
    Elements,
    /// Restricted to mesh vertices.
    Vertices,
}

/// Samples a noisy point cloud from the deformable mesh surface at one
/// timestep: uniform area-weighted barycentric sampling over triangles (or
/// vertex picks), plus isotropic Gaussian noise.
pub fn sample_pointcloud(
    task: &Task,
    timestep: usize,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
    mode: PointSampling,
) -> Result<Tensor> {
    if timestep >= task.n_steps() {
        return Err(Error::contract(format!(
            "timestep {timestep} out of range {}",
            task.n_steps()
        )));
    }
    if n_points < 1 {
        return Err(Error::contract("n_points must be >= 1"));
    }
    let d = task.graph.dim;
    let nd = task.graph.n_deformable;
    let pos = task.positions_at(timestep);
    let mut r = rng::derive(&[rng::label("pointcloud"), task.seed, seed, timestep as u64]);
    let mut out = Vec::with_capacity(n_points * d);
    match mode {
        PointSampling::Vertices => {
            for _ in 0..n_points {
                let v = r.gen_range(0..nd);
                for t in 0..d {
                    out.push(pos.get2(v, t) + noise(&mut r, noise_sigma));
                }
            }
        }
        PointSampling::Elements => {
            let tris = &task.graph.triangles;
            if tris.is_empty() {
                return Err(Error::contract("mesh has no surface triangles to sample"));
            }
            // area-weighted selection at the deformed configuration
            let areas: Vec<f64> = tris
                .iter()
                .map(|t| triangle_area(&pos, t, d))
                .collect();
            let total: f64 = areas.iter().sum();
            for _ in 0..n_points {
                let mut u = r.gen_range(0.0..total);
                let mut pick = tris.len() - 1;
                for (i, a) in areas.iter().enumerate() {
                    if u <= *a {
                        pick = i;
                        break;
                    }
                    u -= a;
                }
                let [a, b, c] = tris[pick];
                let (mut ba, mut bb) = (r.gen::<f64>(), r.gen::<f64>());
                if ba + bb > 1.0 {
                    ba = 1.0 - ba;
                    bb = 1.0 - bb;
                }
                for t in 0..d {
                    let pa = pos.get2(a, t);
                    let pb = pos.get2(b, t);
                    let pc = pos.get2(c, t);
                    let p = pa + ba * (pb - pa) + bb * (pc - pa);
                    out.push(p + noise(&mut r, noise_sigma));
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n_points, d], out))
}

fn noise(r: &mut Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        let v: f64 = r.sample(rand_distr::StandardNormal);
        v * sigma
    }
}

fn triangle_area(pos: &Tensor, tri: &[usize; 3], d: usize) -> f64 {
    let a = pos.row_slice(tri[0]);
    let b = pos.row_slice(tri[1]);
    let c = pos.row_slice(tri[2]);
    if d == 2 {
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs()
    } else {
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = u[1] * v[2] - u[2] * v[1];
        let cy = u[2] * v[0] - u[0] * v[2];
        let cz = u[0] * v[1] - u[1] * v[0];
        0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
    }
}
