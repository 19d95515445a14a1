//! Reference mass-spring cloth.
//!
//! Structural and shear springs only, advanced with the same central
//! differencing as the rope chains, with body collisions resolved along
//! `∇φ`. Used for the stiffness comparison and to generate training data.

use crate::collision::{resolve_particle, BodyStep, CollisionPolicy};
use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub stiffness: f64,
    pub rest: f64,
    /// Damping along the spring direction (N·s/m).
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpringMesh {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub springs: Vec<Spring>,
    /// Pinned vertices and their positions relative to the driver.
    pub pinned: Vec<(usize, Vec3)>,
    pub triangles: Vec<[usize; 3]>,
    /// Linear drag on every vertex (N·s/m).
    pub drag: f64,
}

impl SpringMesh {
    /// Builds springs for every edge listed, at their current lengths.
    pub fn new(positions: Vec<Vec3>, mass: f64, edges: &[(usize, usize)], stiffness: f64, damping: f64) -> Self {
        let springs = edges
            .iter()
            .map(|&(a, b)| Spring { a, b, stiffness, rest: (positions[a] - positions[b]).norm(), damping })
            .collect();
        let n = positions.len();
        Self {
            velocities: vec![Vec3::ZERO; n],
            masses: vec![mass; n],
            positions,
            springs,
            pinned: Vec::new(),
            triangles: Vec::new(),
            drag: 0.0,
        }
    }

    /// Pins vertices where they are now (driver displacement zero).
    pub fn pin(&mut self, vertices: impl IntoIterator<Item = usize>) {
        for v in vertices {
            self.pinned.push((v, self.positions[v]));
        }
    }

    pub fn is_pinned(&self, v: usize) -> bool {
        self.pinned.iter().any(|&(p, _)| p == v)
    }

    pub fn momentum(&self) -> Vec3 {
        self.velocities.iter().zip(&self.masses).map(|(v, m)| *v * *m).sum()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities.iter().zip(&self.masses).map(|(v, m)| 0.5 * m * v.norm_squared()).sum()
    }

    /// Largest `max(0, −φ)` over all vertices.
    pub fn max_penetration(&self, bodies: &[BodyStep<'_>]) -> f64 {
        let mut worst: f64 = 0.0;
        for &x in &self.positions {
            for b in bodies {
                worst = worst.max(-b.phi(x));
            }
        }
        worst
    }
}

/// Spring, drag and gravity forces (pinned vertices included; callers ignore them).
pub fn spring_forces(mesh: &SpringMesh, gravity: Vec3, out: &mut Vec<Vec3>) {
    out.clear();
    out.extend(mesh.masses.iter().zip(&mesh.velocities).map(|(m, v)| gravity * *m - *v * mesh.drag));
    for s in &mesh.springs {
        let d = mesh.positions[s.b] - mesh.positions[s.a];
        let Some((dir, len)) = d.dir_len(1e-15) else { continue };
        let rel_v = (mesh.velocities[s.b] - mesh.velocities[s.a]).dot(dir);
        let f = dir * (s.stiffness * (len - s.rest) + s.damping * rel_v);
        out[s.a] += f;
        out[s.b] -= f;
    }
}

/// Per-step settings of the mass-spring integrator.
#[derive(Clone, Copy, Debug)]
pub struct MassSpringStep<'a> {
    pub dt: f64,
    pub gravity: Vec3,
    /// Driver displacement at the start and end of the step.
    pub driver_now: Vec3,
    pub driver_next: Vec3,
    pub bodies: &'a [BodyStep<'a>],
    pub collision: &'a CollisionPolicy,
}

/// One central-differencing step: half-step velocities, positions, body
/// collisions, forces at the new state, second half-step.
pub fn step_mass_spring(mesh: &mut SpringMesh, p: &MassSpringStep<'_>, scratch: &mut Vec<Vec3>) {
    let dt = p.dt;
    let pin_velocity = (p.driver_next - p.driver_now) / dt;
    spring_forces(mesh, p.gravity, scratch);
    for (v, (f, m)) in mesh.velocities.iter_mut().zip(scratch.iter().zip(&mesh.masses)) {
        *v += *f * (0.5 * dt / m);
    }
    for &(k, _) in &mesh.pinned {
        mesh.velocities[k] = pin_velocity;
    }
    let prev = mesh.positions.clone();
    for (x, v) in mesh.positions.iter_mut().zip(&mesh.velocities) {
        *x += *v * dt;
    }
    for &(k, rest) in &mesh.pinned {
        mesh.positions[k] = rest + p.driver_next;
    }
    if !p.bodies.is_empty() {
        for k in 0..mesh.positions.len() {
            if mesh.is_pinned(k) {
                continue;
            }
            for body in p.bodies {
                let out = resolve_particle(prev[k], mesh.positions[k], mesh.velocities[k], body, p.collision);
                mesh.positions[k] = out.position;
                mesh.velocities[k] = out.velocity;
            }
        }
    }
    spring_forces(mesh, p.gravity, scratch);
    for (v, (f, m)) in mesh.velocities.iter_mut().zip(scratch.iter().zip(&mesh.masses)) {
        *v += *f * (0.5 * dt / m);
    }
    for &(k, _) in &mesh.pinned {
        mesh.velocities[k] = pin_velocity;
    }
}

/// Rectangular grid with structural and shear springs.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPatch {
    pub cols: usize,
    pub rows: usize,
    pub positions: Vec<Vec3>,
    pub edges: Vec<(usize, usize)>,
    pub triangles: Vec<[usize; 3]>,
}

impl GridPatch {
    /// Vertex `(r, c)` sits at `origin + c·du + r·dv`; row 0 is the top.
    pub fn new(cols: usize, rows: usize, origin: Vec3, du: Vec3, dv: Vec3) -> Self {
        assert!(cols >= 2 && rows >= 2);
        let id = |r: usize, c: usize| r * cols + c;
        let positions = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| origin + du * c as f64 + dv * r as f64))
            .collect();
        let mut edges = Vec::new();
        let mut triangles = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.push((id(r, c), id(r, c + 1)));
                }
                if r + 1 < rows {
                    edges.push((id(r, c), id(r + 1, c)));
                }
                if r + 1 < rows && c + 1 < cols {
                    edges.push((id(r, c), id(r + 1, c + 1)));
                    edges.push((id(r, c + 1), id(r + 1, c)));
                    triangles.push([id(r, c), id(r + 1, c), id(r + 1, c + 1)]);
                    triangles.push([id(r, c), id(r + 1, c + 1), id(r, c + 1)]);
                }
            }
        }
        Self { cols, rows, positions, edges, triangles }
    }

    pub fn vertex(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }
}

/// A virtual bone glued to a mesh triangle.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoneEmbedding {
    pub triangle: [usize; 3],
    pub weights: [f64; 3],
}

impl BoneEmbedding {
    pub fn eval(&self, positions: &[Vec3]) -> Vec3 {
        positions[self.triangle[0]] * self.weights[0]
            + positions[self.triangle[1]] * self.weights[1]
            + positions[self.triangle[2]] * self.weights[2]
    }
}

impl GridPatch {
    /// Embeds the point at fractional grid coordinates (`row`, `col`), using
    /// the same triangle split as [`GridPatch::triangles`]. Points on the top
    /// row land on triangles whose third weight is exactly zero.
    pub fn embed(&self, row: f64, col: f64) -> BoneEmbedding {
        let r = (row.floor() as usize).min(self.rows - 2);
        let c = (col.floor() as usize).min(self.cols - 2);
        let (s, t) = (col - c as f64, row - r as f64);
        let (v00, v10, v11, v01) = (self.vertex(r, c), self.vertex(r + 1, c), self.vertex(r + 1, c + 1), self.vertex(r, c + 1));
        // Lower-left triangle (v00, v10, v11) when t ≥ s, else (v00, v11, v01).
        if t >= s {
            BoneEmbedding { triangle: [v00, v10, v11], weights: [1.0 - t, t - s, s] }
        } else {
            BoneEmbedding { triangle: [v00, v11, v01], weights: [1.0 - s, t, s - t] }
        }
    }
}

/// Flat half-annulus in the horizontal plane, `cols` vertices along each arc
/// and `rows` rings, pinned along the inner arc. Returns the mesh and, per
/// column, the vertex indices from the pin outward.
pub fn half_annulus(cols: usize, rows: usize, inner_radius: f64, spacing: f64, height: f64) -> (GridPatch, Vec<Vec<usize>>) {
    let mut patch = GridPatch::new(cols, rows, Vec3::ZERO, Vec3::X, Vec3::Z);
    for r in 0..rows {
        let radius = inner_radius + spacing * r as f64;
        for c in 0..cols {
            let ang = std::f64::consts::PI * c as f64 / (cols - 1) as f64;
            let k = patch.vertex(r, c);
            patch.positions[k] = Vec3::new(radius * ang.cos(), height, radius * ang.sin());
        }
    }
    let columns = (0..cols).map(|c| (0..rows).map(|r| patch.vertex(r, c)).collect()).collect();
    (patch, columns)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LockingEntry {
    pub stiffness: f64,
    pub extent: f64,
    /// Largest spring strain at the end of the run.
    pub max_strain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LockingReport {
    pub entries: Vec<LockingEntry>,
    pub rope_extent: f64,
    pub rope_total_length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LockingSetup {
    pub cols: usize,
    pub rows: usize,
    pub inner_radius: f64,
    pub spacing: f64,
    pub vertex_mass: f64,
    pub settle_time: f64,
    pub gravity: Vec3,
}

impl Default for LockingSetup {
    fn default() -> Self {
        Self {
            cols: 5,
            rows: 8,
            inner_radius: 0.1,
            spacing: 0.05,
            vertex_mass: 0.01,
            settle_time: 6.0,
            gravity: Vec3::new(0.0, -9.81, 0.0),
        }
    }
}

fn vertical_extent(positions: &[Vec3], top: f64) -> f64 {
    positions.iter().map(|p| top - p.y).fold(0.0, f64::max)
}

/// Hangs the half-annulus at each stiffness and a rope-chain version of the
/// same columns, and reports the steady vertical extent of each.
pub fn locking_experiment(setup: &LockingSetup, stiffness: &[f64]) -> LockingReport {
    use crate::engine::{run, RootBinding, Scene, SimState};
    use crate::forces::{ForceSpec, KinematicDriver};
    use crate::rope::{RopeChain, SolverPolicy};

    let (patch, columns) = half_annulus(setup.cols, setup.rows, setup.inner_radius, setup.spacing, 0.0);
    let entries = stiffness
        .iter()
        .map(|&k| {
            let damping = 2.0 * (k * setup.vertex_mass).sqrt() * 0.2;
            let mut mesh = SpringMesh::new(patch.positions.clone(), setup.vertex_mass, &patch.edges, k, damping);
            mesh.drag = 0.5 * setup.vertex_mass;
            mesh.pin(columns.iter().map(|c| c[0]));
            let omega = (4.0 * k / setup.vertex_mass).sqrt();
            let dt = (0.2 / omega).min(1e-3);
            let steps = (setup.settle_time / dt).ceil() as usize;
            let policy = CollisionPolicy::gradient();
            let params = MassSpringStep {
                dt,
                gravity: setup.gravity,
                driver_now: Vec3::ZERO,
                driver_next: Vec3::ZERO,
                bodies: &[],
                collision: &policy,
            };
            let mut scratch = Vec::new();
            for _ in 0..steps {
                step_mass_spring(&mut mesh, &params, &mut scratch);
            }
            let max_strain = mesh
                .springs
                .iter()
                .map(|s| ((mesh.positions[s.a] - mesh.positions[s.b]).norm() / s.rest - 1.0).abs())
                .fold(0.0, f64::max);
            LockingEntry { stiffness: k, extent: vertical_extent(&mesh.positions, 0.0), max_strain }
        })
        .collect();

    let chains: Vec<RopeChain> = columns
        .iter()
        .map(|col| {
            let pos: Vec<Vec3> = col.iter().map(|&v| patch.positions[v]).collect();
            let lmax = vec![setup.spacing; pos.len() - 1];
            RopeChain::new(&pos, lmax, setup.vertex_mass).expect("valid column chain")
        })
        .collect();
    let rope_total_length = chains[0].total_max_length();
    let dt = 1.0 / 240.0;
    let scene = Scene {
        bindings: chains.iter().map(|c| RootBinding { driver: 0, rest_root: c.bones[0].position }).collect(),
        drivers: vec![KinematicDriver::default()],
        bodies: vec![],
        forces: vec![
            ForceSpec::Gravity { g: setup.gravity },
            ForceSpec::RelativeDamping { coefficient: 0.05 * setup.vertex_mass / dt },
        ],
        solver: SolverPolicy::tolerance(1e-8),
        collision: CollisionPolicy::default(),
        dt,
        frames: (setup.settle_time / dt).ceil() as usize,
    };
    let records = run(&scene, SimState::new(chains, 0.0));
    let last = records.last().expect("at least one frame");
    let rope_positions: Vec<Vec3> = last.chains.iter().flat_map(|c| c.positions.iter().copied()).collect();
    LockingReport { entries, rope_extent: vertical_extent(&rope_positions, 0.0), rope_total_length }
}


#[cfg(test)]
mod locking_tests {
    use super::*;

    #[test]
    fn stiffness_sweep_brackets_rope_chain() {
        let r = locking_experiment(&LockingSetup::default(), &[1.0, 10.0, 100.0, 1e3, 1e4]);
        let first = r.entries.first().unwrap();
        let last = r.entries.last().unwrap();
        assert!(last.extent < r.rope_extent, "stiff mesh should lock: {r:?}");
        assert!(first.extent > r.rope_extent, "weak mesh should overstretch: {r:?}");
        assert!(r.rope_extent <= r.rope_total_length * (1.0 + 1e-9));
        assert!((r.rope_extent - r.rope_total_length).abs() < 1e-4 * r.rope_total_length);
        for w in r.entries.windows(2) {
            assert!(w[1].extent <= w[0].extent, "{r:?}");
        }
    }
}
