//! JSON scene description and its validation.
//!
//! See `docs/scene-format.md` for the field-by-field schema.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{CollisionBody, CollisionPolicy, NormalChoice, PushoutDirection};
use crate::engine::{RootBinding, Scene, SimState};
use crate::forces::{ForceSpec, KinematicDriver};
use crate::geometry::Vec3;
use crate::rope::{RopeChain, SolverPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scene file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scene parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Rest positions, root first.
    pub positions: Vec<Vec3>,
    /// Defaults to the rest segment lengths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_lengths: Option<Vec<f64>>,
    /// Uniform mass of the simulated bones (kg).
    #[serde(default = "default_mass")]
    pub mass: f64,
    /// Per-bone masses for bones `1..=m`; overrides `mass`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masses: Option<Vec<f64>>,
    #[serde(default)]
    pub driver: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocities: Option<Vec<Vec3>>,
}

fn default_mass() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionConfig {
    pub pushout_direction: PushoutDirection,
    pub projection_normal: NormalChoice,
    /// Absolute offset in metres; `None` means 1e-3 of the scene diagonal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub pushout_iterations: usize,
    pub friction: f64,
    pub ensure_exit: bool,
    pub preserve_length: bool,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        let p = CollisionPolicy::default();
        Self {
            pushout_direction: p.pushout_direction,
            projection_normal: p.projection_normal,
            epsilon: None,
            pushout_iterations: p.pushout_iterations,
            friction: p.friction,
            ensure_exit: p.ensure_exit,
            preserve_length: p.preserve_length,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub dt: f64,
    pub frames: usize,
    #[serde(default)]
    pub start_time: f64,
    /// Root drivers; keys are displacements of the root from its rest position.
    #[serde(default)]
    pub drivers: Vec<KinematicDriver>,
    pub chains: Vec<ChainConfig>,
    #[serde(default)]
    pub bodies: Vec<CollisionBody>,
    #[serde(default)]
    pub forces: Vec<ForceSpec>,
    #[serde(default)]
    pub solver: SolverPolicy,
    #[serde(default)]
    pub collision: CollisionConfig,
    /// Uniform random perturbation (m/s, per component) of the initial
    /// velocities, drawn from the run seed.
    #[serde(default)]
    pub velocity_jitter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_csv: Option<String>,
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene config serializes")
    }

    /// Diagonal of the box around chain rest positions and body primitives
    /// (at their local placement).
    pub fn scene_diagonal(&self) -> f64 {
        let mut lo = Vec3::splat(f64::INFINITY);
        let mut hi = Vec3::splat(f64::NEG_INFINITY);
        let mut add = |p: Vec3| {
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        };
        for c in &self.chains {
            c.positions.iter().copied().for_each(&mut add);
        }
        for b in &self.bodies {
            for p in &b.sdf.primitives {
                let (l, h) = p.bounds();
                add(l);
                add(h);
            }
        }
        if lo.x > hi.x {
            return 1.0;
        }
        (hi - lo).norm()
    }

    /// Validates and builds the scene and its initial state.
    pub fn build(&self, seed: u64) -> Result<(Scene, SimState), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !self.start_time.is_finite() {
            return bad("start_time must be finite".into());
        }
        if self.chains.is_empty() {
            return bad("scene has no chains".into());
        }
        if !(self.velocity_jitter >= 0.0 && self.velocity_jitter.is_finite()) {
            return bad("velocity_jitter must be >= 0".into());
        }
        self.solver.validate().map_err(|e| ConfigError::Invalid(format!("solver: {e}")))?;
        let mut drivers = self.drivers.clone();
        if drivers.is_empty() {
            drivers.push(KinematicDriver::default());
        }
        for (k, d) in drivers.iter().enumerate() {
            d.validate().map_err(|e| ConfigError::Invalid(format!("drivers[{k}]: {e}")))?;
        }
        for (k, b) in self.bodies.iter().enumerate() {
            for (j, p) in b.sdf.primitives.iter().enumerate() {
                p.validate().map_err(|e| ConfigError::Invalid(format!("bodies[{k}].sdf[{j}]: {e}")))?;
            }
            b.motion.validate().map_err(|e| ConfigError::Invalid(format!("bodies[{k}].motion: {e}")))?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chains = Vec::with_capacity(self.chains.len());
        let mut bindings = Vec::with_capacity(self.chains.len());
        for (k, c) in self.chains.iter().enumerate() {
            let here = |e: String| ConfigError::Invalid(format!("chains[{k}]: {e}"));
            if c.driver >= drivers.len() {
                return Err(here(format!("driver {} does not exist", c.driver)));
            }
            if c.positions.iter().any(|p| !p.is_finite()) {
                return Err(here("non-finite position".into()));
            }
            let rest: Vec<f64> = c.positions.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
            let lmax = c.max_lengths.clone().unwrap_or(rest);
            let mut chain = match &c.masses {
                Some(m) => RopeChain::with_masses(&c.positions, lmax, m),
                None => RopeChain::new(&c.positions, lmax, c.mass),
            }
            .map_err(|e| here(e.to_string()))?;
            let rest_root = c.positions[0];
            chain.bones[0].position = rest_root + drivers[c.driver].position(self.start_time);
            if let Some(v) = &c.velocities {
                if v.len() != chain.bones.len() {
                    return Err(here(format!("{} velocities for {} bones", v.len(), chain.bones.len())));
                }
                for (b, v) in chain.bones.iter_mut().zip(v).skip(1) {
                    b.velocity = *v;
                }
            }
            if self.velocity_jitter > 0.0 {
                let j = self.velocity_jitter;
                for b in chain.bones.iter_mut().skip(1) {
                    b.velocity += Vec3::new(rng.gen_range(-j..=j), rng.gen_range(-j..=j), rng.gen_range(-j..=j));
                }
            }
            chains.push(chain);
            bindings.push(RootBinding { driver: c.driver, rest_root });
        }

        let layout: Vec<usize> = chains.iter().map(|c| c.bones.len()).collect();
        let mut forces = self.forces.clone();
        for (k, f) in forces.iter_mut().enumerate() {
            f.validate(&layout).map_err(|e| ConfigError::Invalid(format!("forces[{k}]: {e}")))?;
            f.resolve_rest_length(&chains);
        }

        let c = &self.collision;
        let collision = CollisionPolicy {
            pushout_direction: c.pushout_direction,
            projection_normal: c.projection_normal,
            epsilon: c.epsilon.unwrap_or(1e-3 * self.scene_diagonal()),
            pushout_iterations: c.pushout_iterations,
            friction: c.friction,
            ensure_exit: c.ensure_exit,
            preserve_length: c.preserve_length,
        };
        collision.validate().map_err(|e| ConfigError::Invalid(format!("collision: {e}")))?;

        let scene = Scene {
            bindings,
            drivers,
            bodies: self.bodies.clone(),
            forces,
            solver: self.solver,
            collision,
            dt: self.dt,
            frames: self.frames,
        };
        Ok((scene, SimState::new(chains, self.start_time)))
    }
}
