//! Ground-truth cloth data for the neural stages.
//!
//! A square mass-spring patch hangs from its top row, which follows a
//! seeded root path past a sphere. Virtual bones are glued to the patch in a
//! few vertical chains. Every recorded frame stores all vertices and bones
//! plus the rigid frame of the root. The file layout is in
//! `docs/formats.md`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{AnalyticSdf, BodyStep, CollisionBody, CollisionPolicy, NormalChoice, PushoutDirection, SdfPrimitive};
use crate::forces::{ForceSpec, KinematicDriver};
use crate::geometry::{Mat3, Vec3};
use crate::io::FormatError;
use crate::refcloth::{step_mass_spring, BoneEmbedding, GridPatch, MassSpringStep, SpringMesh};
use crate::rope::SolverPolicy;
use crate::scene::{ChainConfig, CollisionConfig, SceneConfig};

pub const DATASET_MAGIC: &[u8; 4] = b"RCDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSetup {
    pub cols: usize,
    pub rows: usize,
    /// Grid spacing (m).
    pub spacing: f64,
    /// Height of the pinned top row (m).
    pub top_y: f64,
    pub vertex_mass: f64,
    pub stiffness: f64,
    pub spring_damping: f64,
    pub drag: f64,
    pub chains: usize,
    /// Grid rows of the bones of every chain; the first entry is the root.
    pub bone_rows: Vec<f64>,
    pub frame_dt: f64,
    pub substeps: usize,
    pub frames: usize,
    pub settle_time: f64,
    pub sphere_center: Vec3,
    pub sphere_radius: f64,
    pub collision_epsilon: f64,
}

impl Default for DatasetSetup {
    fn default() -> Self {
        Self {
            cols: 20,
            rows: 20,
            spacing: 0.05,
            top_y: 1.0,
            vertex_mass: 5e-4,
            stiffness: 200.0,
            spring_damping: 0.02,
            drag: 2e-4,
            chains: 4,
            bone_rows: vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0],
            frame_dt: 1.0 / 60.0,
            substeps: 20,
            frames: 600,
            settle_time: 3.0,
            sphere_center: Vec3::new(0.0, 0.45, 0.22),
            sphere_radius: 0.2,
            collision_epsilon: 1e-3,
        }
    }
}

impl DatasetSetup {
    pub fn validate(&self) -> Result<(), String> {
        if self.cols < 4 || self.rows < 4 {
            return Err("patch needs at least 4×4 vertices".into());
        }
        if self.chains == 0 || self.bone_rows.len() < 2 {
            return Err("need at least one chain with one simulated bone".into());
        }
        if self.bone_rows.windows(2).any(|w| w[1] <= w[0]) || self.bone_rows[0] != 0.0 {
            return Err("bone_rows must start at 0 and increase".into());
        }
        if *self.bone_rows.last().unwrap() > (self.rows - 1) as f64 {
            return Err("bone_rows exceed the patch".into());
        }
        let positive = [self.spacing, self.vertex_mass, self.stiffness, self.frame_dt, self.sphere_radius];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.substeps == 0 {
            return Err("spacing, mass, stiffness, frame_dt, radius and substeps must be positive".into());
        }
        Ok(())
    }

    /// Fractional grid columns of the chains, spread evenly inside the
    /// patch with a 1.5-column margin.
    pub fn chain_columns(&self) -> Vec<f64> {
        let span = self.cols as f64 - 4.0;
        (0..self.chains)
            .map(|k| if self.chains == 1 { 0.5 * (self.cols - 1) as f64 } else { 1.5 + span * k as f64 / (self.chains - 1) as f64 })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Validation = 1,
    Holdout = 2,
}

impl Split {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Holdout),
            _ => None,
        }
    }
}

/// Seeded 80/10/10 assignment: a shuffled frame order, the first 80% train,
/// the next 10% validation, the rest holdout (counts rounded to nearest).
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17));
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let mut out = vec![Split::Holdout; n];
    for (rank, &k) in order.iter().enumerate() {
        out[k] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Holdout
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub setup: DatasetSetup,
    pub seed: u64,
    pub n_vertices: usize,
    pub n_bones: usize,
    pub triangles: Vec<[usize; 3]>,
    /// Settled drape with the root at its rest position.
    pub rest_vertices: Vec<Vec3>,
    /// Per chain, per bone (root first).
    pub embeddings: Vec<Vec<BoneEmbedding>>,
    /// Rest bone positions, flattened chain by chain.
    pub rest_bones: Vec<Vec3>,
    pub driver: KinematicDriver,
    pub bodies: Vec<CollisionBody>,
}

impl DatasetMeta {
    pub fn chain_layout(&self) -> Vec<usize> {
        self.embeddings.iter().map(Vec::len).collect()
    }

    /// Flat indices of the simulated (non-root) bones.
    pub fn simulated_bones(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut base = 0;
        for n in self.chain_layout() {
            out.extend(base + 1..base + n);
            base += n;
        }
        out
    }

    /// Flat indices of the root bones.
    pub fn root_bones(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut base = 0;
        for n in self.chain_layout() {
            out.push(base);
            base += n;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFrame {
    pub time: f64,
    pub translation: Vec3,
    pub rotation: Mat3,
    pub vertices: Vec<Vec3>,
    pub bones: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub splits: Vec<Split>,
    pub frames: Vec<DatasetFrame>,
}

/// Seeded smooth root path: a sway in x, a push in +z towards the sphere
/// and back, a little bob in y. Starts at zero displacement.
pub fn driver_path(seed: u64, duration: f64) -> KinematicDriver {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_pi = 2.0 * std::f64::consts::PI;
    let (ax, fx, px) = (rng.gen_range(0.08..0.18), rng.gen_range(0.15..0.35), rng.gen_range(0.0..two_pi));
    let (ay, fy, py) = (rng.gen_range(0.01..0.04), rng.gen_range(0.2..0.5), rng.gen_range(0.0..two_pi));
    let (az, fz) = (rng.gen_range(0.3..0.42), rng.gen_range(0.12..0.25));
    let key_dt = 0.1;
    let n = (duration / key_dt).ceil() as usize + 2;
    KinematicDriver::from_fn((0..n).map(|k| k as f64 * key_dt), |t| {
        Vec3::new(
            ax * ((two_pi * fx * t + px).sin() - px.sin()),
            ay * ((two_pi * fy * t + py).sin() - py.sin()),
            0.5 * az * (1.0 - (two_pi * fz * t).cos()),
        )
    })
}

struct Cloth {
    mesh: SpringMesh,
    scratch: Vec<Vec3>,
}

impl Cloth {
    fn advance(&mut self, setup: &DatasetSetup, bodies: &[CollisionBody], driver: &KinematicDriver, t0: f64, policy: &CollisionPolicy) {
        let h = setup.frame_dt / setup.substeps as f64;
        let gravity = Vec3::new(0.0, -crate::experiments::STANDARD_GRAVITY, 0.0);
        for s in 0..setup.substeps {
            let t = t0 + s as f64 * h;
            let steps: Vec<BodyStep<'_>> = bodies.iter().map(|b| b.step(t, h)).collect();
            let params = MassSpringStep {
                dt: h,
                gravity,
                driver_now: driver.position(t),
                driver_next: driver.position(t + h),
                bodies: &steps,
                collision: policy,
            };
            step_mass_spring(&mut self.mesh, &params, &mut self.scratch);
        }
    }
}

/// Settles the patch, then records `setup.frames` frames at
/// `t = k·frame_dt`, `k = 1..=frames`.
pub fn generate_dataset(setup: &DatasetSetup, seed: u64) -> Result<Dataset, String> {
    setup.validate()?;
    let patch = GridPatch::new(
        setup.cols,
        setup.rows,
        Vec3::new(-0.5 * setup.spacing * (setup.cols - 1) as f64, setup.top_y, 0.0),
        Vec3::new(setup.spacing, 0.0, 0.0),
        Vec3::new(0.0, -setup.spacing, 0.0),
    );
    let mut mesh = SpringMesh::new(patch.positions.clone(), setup.vertex_mass, &patch.edges, setup.stiffness, setup.spring_damping);
    mesh.triangles = patch.triangles.clone();
    mesh.drag = setup.drag;
    mesh.pin((0..setup.cols).map(|c| patch.vertex(0, c)));

    let bodies = vec![CollisionBody::stationary(AnalyticSdf::new(vec![SdfPrimitive::Sphere {
        center: setup.sphere_center,
        radius: setup.sphere_radius,
    }]))];
    let policy = CollisionPolicy { epsilon: setup.collision_epsilon, ..CollisionPolicy::gradient() };
    let duration = setup.frames as f64 * setup.frame_dt;
    let driver = driver_path(seed, duration);
    let rest_driver = KinematicDriver::default();

    let mut cloth = Cloth { mesh, scratch: Vec::new() };
    let settle_frames = (setup.settle_time / setup.frame_dt).round() as usize;
    for k in 0..settle_frames {
        cloth.advance(setup, &bodies, &rest_driver, k as f64 * setup.frame_dt, &policy);
    }
    cloth.mesh.velocities.iter_mut().for_each(|v| *v = Vec3::ZERO);
    let rest_vertices = cloth.mesh.positions.clone();

    let embeddings: Vec<Vec<BoneEmbedding>> = setup
        .chain_columns()
        .iter()
        .map(|&col| setup.bone_rows.iter().map(|&row| patch.embed(row, col)).collect())
        .collect();
    let bones_of = |x: &[Vec3]| -> Vec<Vec3> { embeddings.iter().flatten().map(|e| e.eval(x)).collect() };
    let rest_bones = bones_of(&rest_vertices);

    let mut frames = Vec::with_capacity(setup.frames);
    for k in 0..setup.frames {
        let t0 = k as f64 * setup.frame_dt;
        cloth.advance(setup, &bodies, &driver, t0, &policy);
        let x = &cloth.mesh.positions;
        if x.iter().any(|p| !p.is_finite()) {
            return Err(format!("cloth simulation diverged at frame {}", k + 1));
        }
        let time = (k + 1) as f64 * setup.frame_dt;
        frames.push(DatasetFrame {
            time,
            translation: driver.position(time),
            rotation: Mat3::IDENTITY,
            vertices: x.clone(),
            bones: bones_of(x),
        });
    }

    let meta = DatasetMeta {
        setup: setup.clone(),
        seed,
        n_vertices: rest_vertices.len(),
        n_bones: rest_bones.len(),
        triangles: patch.triangles,
        rest_vertices,
        embeddings,
        rest_bones,
        driver,
        bodies,
    };
    Ok(Dataset { meta, splits: assign_splits(setup.frames, seed), frames })
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits.iter().enumerate().filter(|(_, s)| **s == split).map(|(k, _)| k).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| FormatError::Invalid(e.to_string()))?;
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;
        w.write_u64::<LittleEndian>(self.frames.len() as u64)?;
        for s in &self.splits {
            w.write_u8(*s as u8)?;
        }
        for f in &self.frames {
            w.write_f64::<LittleEndian>(f.time)?;
            write_vec3s(&mut w, &[f.translation])?;
            for v in f.rotation.to_row_major() {
                w.write_f64::<LittleEndian>(v)?;
            }
            write_vec3s(&mut w, &f.vertices)?;
            write_vec3s(&mut w, &f.bones)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(FormatError::Invalid("not a dataset file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(FormatError::Invalid(format!("unsupported dataset version {version}")));
        }
        let meta_len = r.read_u64::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: DatasetMeta = serde_json::from_slice(&meta).map_err(|e| FormatError::Invalid(format!("dataset header: {e}")))?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut splits = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.read_u8()?;
            splits.push(Split::from_u8(b).ok_or_else(|| FormatError::Invalid(format!("bad split tag {b}")))?);
        }
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let time = r.read_f64::<LittleEndian>()?;
            let translation = read_vec3s(&mut r, 1)?[0];
            let mut m = [0.0; 9];
            r.read_f64_into::<LittleEndian>(&mut m)?;
            let vertices = read_vec3s(&mut r, meta.n_vertices)?;
            let bones = read_vec3s(&mut r, meta.n_bones)?;
            frames.push(DatasetFrame { time, translation, rotation: Mat3::from_row_major(m), vertices, bones });
        }
        let mut rest = Vec::new();
        if r.read_to_end(&mut rest)? != 0 {
            return Err(FormatError::Invalid("trailing bytes after the last frame".into()));
        }
        Ok(Self { meta, splits, frames })
    }

    /// One row per vertex or bone per frame, for inspection.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FormatError> {
        #[derive(Serialize)]
        struct Row {
            frame: usize,
            split: Split,
            kind: &'static str,
            index: usize,
            x: f64,
            y: f64,
            z: f64,
        }
        let mut out = csv::Writer::from_writer(w);
        for (k, (f, s)) in self.frames.iter().zip(&self.splits).enumerate() {
            let rows = f.vertices.iter().map(|p| ("vertex", p)).chain(f.bones.iter().map(|p| ("bone", p)));
            let mut idx = [0usize; 2];
            for (kind, p) in rows {
                let slot = &mut idx[(kind == "bone") as usize];
                out.serialize(Row { frame: k + 1, split: *s, kind, index: *slot, x: p.x, y: p.y, z: p.z })?;
                *slot += 1;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Rope-chain scene with the same bones, root path, bodies and push-out
    /// policy, one frame per dataset frame.
    pub fn rope_scene(&self) -> SceneConfig {
        let setup = &self.meta.setup;
        let cloth_mass = setup.vertex_mass * self.meta.n_vertices as f64;
        let simulated = self.meta.simulated_bones().len().max(1);
        let mut chains = Vec::new();
        let mut base = 0;
        for n in self.meta.chain_layout() {
            chains.push(ChainConfig {
                positions: self.meta.rest_bones[base..base + n].to_vec(),
                max_lengths: None,
                mass: cloth_mass / simulated as f64,
                masses: None,
                driver: 0,
                velocities: None,
            });
            base += n;
        }
        SceneConfig {
            dt: setup.frame_dt,
            frames: self.frames.len(),
            start_time: 0.0,
            drivers: vec![self.meta.driver.clone()],
            chains,
            bodies: self.meta.bodies.clone(),
            forces: vec![
                ForceSpec::Gravity { g: Vec3::new(0.0, -crate::experiments::STANDARD_GRAVITY, 0.0) },
                ForceSpec::RelativeDamping { coefficient: 0.01 },
            ],
            solver: SolverPolicy::tolerance(1e-6),
            collision: CollisionConfig {
                pushout_direction: PushoutDirection::Gradient,
                projection_normal: NormalChoice::Gradient,
                epsilon: Some(setup.collision_epsilon),
                ..CollisionConfig::default()
            },
            velocity_jitter: 0.0,
            output_csv: None,
        }
    }
}

/// Root frame of a bone configuration: the mean displacement of the chain
/// roots from their rest positions, no rotation.
pub fn root_frame(rest_bones: &[Vec3], roots: &[usize], bones: &[Vec3]) -> (Vec3, Mat3) {
    let t = roots.iter().map(|&k| bones[k] - rest_bones[k]).sum::<Vec3>() / roots.len() as f64;
    (t, Mat3::IDENTITY)
}

fn write_vec3s<W: Write>(w: &mut W, xs: &[Vec3]) -> std::io::Result<()> {
    for p in xs {
        w.write_f64::<LittleEndian>(p.x)?;
        w.write_f64::<LittleEndian>(p.y)?;
        w.write_f64::<LittleEndian>(p.z)?;
    }
    Ok(())
}

fn read_vec3s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<Vec3>> {
    let mut flat = vec![0.0; 3 * n];
    r.read_f64_into::<LittleEndian>(&mut flat)?;
    Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}
