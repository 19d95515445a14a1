//! Rope-chain state and the two inequality solves of the velocity update.
//!
//! A chain is a root-to-tip list of virtual bones. Bone 0 is the kinematic
//! root (its mass is treated as infinite); segment `i` (1-based, `1..=m`)
//! joins bone `i - 1` to bone `i` and may never be longer than its maximal
//! length. Segments are free to go slack.
//!
//! Two projected Gauss-Seidel solves act on the taut segments only:
//!
//! * [`solve_tensions`] sweeps tip to root and produces nonnegative tensions
//!   that keep taut segments rotating instead of stretching.
//! * [`solve_impulses`] sweeps root to tip and produces nonnegative impulses
//!   that cancel separating relative velocity along taut segments.
//!
//! Slack segments are held at exactly zero, which splits the tridiagonal
//! systems into independent blocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Vec3, WORLD_UP};

/// Segments shorter than this have no usable direction.
pub const DEGENERATE_LENGTH: f64 = 1e-12;

/// Default hard cap on sweeps in tolerance mode.
pub const DEFAULT_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum RopeError {
    #[error("a rope chain needs a root and at least one simulated bone, got {0} bones")]
    TooFewBones(usize),
    #[error("expected {expected} maximal lengths, got {got}")]
    LengthCount { expected: usize, got: usize },
    #[error("segment {segment} has non-positive maximal length {value}")]
    BadMaxLength { segment: usize, value: f64 },
    #[error("bone {bone} has invalid mass {value}")]
    BadMass { bone: usize, value: f64 },
    #[error("expected {expected} masses, got {got}")]
    MassCount { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VirtualBone {
    pub position: Vec3,
    pub velocity: Vec3,
    /// kg; `f64::INFINITY` for the kinematic root.
    pub mass: f64,
}

impl VirtualBone {
    pub fn is_kinematic(&self) -> bool {
        self.mass.is_infinite()
    }
}

/// Where a segment direction came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirSource {
    Fresh,
    Cached,
    /// Zero-length segment with nothing cached; world up was used.
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentDir {
    pub dir: Vec3,
    pub len: f64,
    pub source: DirSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeChain {
    pub bones: Vec<VirtualBone>,
    max_lengths: Vec<f64>,
    dir_cache: Vec<Option<Vec3>>,
}

impl RopeChain {
    /// Builds a chain at rest from bone positions, with uniform mass for every
    /// non-root bone.
    pub fn new(positions: &[Vec3], max_lengths: Vec<f64>, mass: f64) -> Result<Self, RopeError> {
        let masses = vec![mass; positions.len().saturating_sub(1)];
        Self::with_masses(positions, max_lengths, &masses)
    }

    /// `masses` lists the non-root bones (length `m`).
    pub fn with_masses(
        positions: &[Vec3],
        max_lengths: Vec<f64>,
        masses: &[f64],
    ) -> Result<Self, RopeError> {
        if positions.len() < 2 {
            return Err(RopeError::TooFewBones(positions.len()));
        }
        let m = positions.len() - 1;
        if max_lengths.len() != m {
            return Err(RopeError::LengthCount { expected: m, got: max_lengths.len() });
        }
        if masses.len() != m {
            return Err(RopeError::MassCount { expected: m, got: masses.len() });
        }
        for (k, &l) in max_lengths.iter().enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                return Err(RopeError::BadMaxLength { segment: k + 1, value: l });
            }
        }
        for (k, &mass) in masses.iter().enumerate() {
            if !(mass > 0.0 && mass.is_finite()) {
                return Err(RopeError::BadMass { bone: k + 1, value: mass });
            }
        }
        let bones = positions
            .iter()
            .enumerate()
            .map(|(k, &p)| VirtualBone {
                position: p,
                velocity: Vec3::ZERO,
                mass: if k == 0 { f64::INFINITY } else { masses[k - 1] },
            })
            .collect();
        let mut chain = RopeChain { bones, max_lengths, dir_cache: vec![None; m] };
        chain.refresh_direction_cache();
        Ok(chain)
    }

    /// Number of segments (`m`); bones are indexed `0..=m`.
    pub fn segment_count(&self) -> usize {
        self.max_lengths.len()
    }

    /// Maximal length of segment `i` (1-based).
    #[inline]
    pub fn max_length(&self, i: usize) -> f64 {
        self.max_lengths[i - 1]
    }

    pub fn max_lengths(&self) -> &[f64] {
        &self.max_lengths
    }

    pub fn total_max_length(&self) -> f64 {
        self.max_lengths.iter().sum()
    }

    #[inline]
    pub fn mass(&self, i: usize) -> f64 {
        self.bones[i].mass
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.bones.iter().map(|b| b.position).collect()
    }

    pub fn velocities(&self) -> Vec<Vec3> {
        self.bones.iter().map(|b| b.velocity).collect()
    }

    /// Current length of segment `i`.
    #[inline]
    pub fn length(&self, i: usize) -> f64 {
        (self.bones[i].position - self.bones[i - 1].position).norm()
    }

    /// Direction and length of segment `i`. Zero-length segments reuse the
    /// direction cached at the end of the previous step.
    pub fn segment_dir_len(&self, i: usize) -> SegmentDir {
        debug_assert!((1..=self.segment_count()).contains(&i));
        let l = self.bones[i].position - self.bones[i - 1].position;
        match l.dir_len(DEGENERATE_LENGTH) {
            Some((dir, len)) => SegmentDir { dir, len, source: DirSource::Fresh },
            None => {
                let len = l.norm();
                match self.dir_cache[i - 1] {
                    Some(dir) => SegmentDir { dir, len, source: DirSource::Cached },
                    None => SegmentDir { dir: WORLD_UP, len, source: DirSource::Fallback },
                }
            }
        }
    }

    /// Stores the current direction of every non-degenerate segment.
    pub fn refresh_direction_cache(&mut self) {
        for i in 1..=self.segment_count() {
            let l = self.bones[i].position - self.bones[i - 1].position;
            if let Some((dir, _)) = l.dir_len(DEGENERATE_LENGTH) {
                self.dir_cache[i - 1] = Some(dir);
            }
        }
    }

    /// Test hook for seeding the direction cache.
    pub fn set_cached_direction(&mut self, i: usize, dir: Vec3) {
        self.dir_cache[i - 1] = Some(dir);
    }

    #[inline]
    pub fn is_taut(&self, i: usize, taut_threshold: f64) -> bool {
        self.length(i) >= self.max_length(i) * taut_threshold
    }

    pub fn taut_flags(&self, taut_threshold: f64) -> Vec<bool> {
        (1..=self.segment_count()).map(|i| self.is_taut(i, taut_threshold)).collect()
    }

    /// Largest `l_i / l_max,i − 1` over the chain (negative when all slack).
    pub fn max_stretch(&self) -> f64 {
        (1..=self.segment_count())
            .map(|i| self.length(i) / self.max_length(i) - 1.0)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Magnitude of the centripetal force that keeps the two bones of segment `i`
/// rotating about their center of mass.
///
/// Segment 1 attaches to the infinitely heavy root, so the center of mass is
/// the root itself and the child-side form is used.
pub fn centripetal_magnitude(chain: &RopeChain, i: usize) -> f64 {
    let seg = chain.segment_dir_len(i);
    let child = &chain.bones[i];
    let parent = &chain.bones[i - 1];
    let (xc, vc) = if i == 1 {
        (parent.position, parent.velocity)
    } else {
        let total = parent.mass + child.mass;
        (
            (parent.position * parent.mass + child.position * child.mass) / total,
            (parent.velocity * parent.mass + child.velocity * child.mass) / total,
        )
    };
    let radius = (child.position - xc).norm();
    if radius < DEGENERATE_LENGTH {
        return 0.0;
    }
    let tangential = (child.velocity - vc).reject(seg.dir);
    child.mass * tangential.norm_squared() / radius
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Exactly this many sweeps.
    FixedSweeps(usize),
    /// Sweep until the largest change in one sweep is below this fraction of
    /// the largest magnitude.
    Tolerance(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverPolicy {
    pub mode: SweepMode,
    /// A segment is taut when `l ≥ l_max · taut_threshold`.
    pub taut_threshold: f64,
    pub warm_start: bool,
    /// Hard cap in tolerance mode.
    pub max_sweeps: usize,
    /// Run an impulse solve straight after the position sweep on every
    /// chain. When off, only chains with a bone within the collision offset
    /// of a body get it; elsewhere the second tension half-step already turns
    /// the half-step velocity onto the new tangent, and projecting it away
    /// first makes a swinging bone drift inside its rope.
    pub post_position_impulse: bool,
}

impl Default for SolverPolicy {
    fn default() -> Self {
        Self {
            mode: SweepMode::FixedSweeps(1),
            taut_threshold: 1.0 - 1e-7,
            warm_start: false,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            post_position_impulse: false,
        }
    }
}

impl SolverPolicy {
    pub fn sweeps(count: usize) -> Self {
        Self { mode: SweepMode::FixedSweeps(count), ..Self::default() }
    }

    pub fn tolerance(eps: f64) -> Self {
        Self { mode: SweepMode::Tolerance(eps), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.mode {
            SweepMode::FixedSweeps(0) => return Err("sweep count must be at least 1".into()),
            SweepMode::Tolerance(eps) if !(eps > 0.0) => {
                return Err(format!("solver tolerance must be positive, got {eps}"))
            }
            _ => {}
        }
        if !(self.taut_threshold > 0.0 && self.taut_threshold <= 1.0) {
            return Err(format!("taut threshold must be in (0, 1], got {}", self.taut_threshold));
        }
        if self.max_sweeps == 0 {
            return Err("max_sweeps must be at least 1".into());
        }
        Ok(())
    }
}

/// Result of one tension or impulse solve. Per-segment vectors have length
/// `m`; entry `k` belongs to segment `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveScratch {
    pub magnitudes: Vec<f64>,
    pub taut: Vec<bool>,
    pub dirs: Vec<Vec3>,
    pub sweeps: usize,
    /// False only when tolerance mode hit the sweep cap.
    pub converged: bool,
    /// Segments whose direction came from the cache or the world-up fallback.
    pub degenerate_segments: usize,
}

impl SolveScratch {
    /// Value for segment `i` (1-based).
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.magnitudes[i - 1]
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            magnitudes: vec![0.0; m],
            taut: vec![false; m],
            dirs: vec![WORLD_UP; m],
            sweeps: 0,
            converged: true,
            degenerate_segments: 0,
        }
    }

    /// Nonnegativity and slack-complementarity hold exactly.
    pub fn complementarity_holds(&self) -> bool {
        self.magnitudes
            .iter()
            .zip(&self.taut)
            .all(|(&v, &taut)| v >= 0.0 && (taut || v == 0.0))
    }
}

struct Setup {
    dirs: Vec<Vec3>,
    taut: Vec<bool>,
    /// `couple[k] = l̂_{k+1} · l̂_{k+2}` between consecutive segments.
    couple: Vec<f64>,
    degenerate: usize,
}

fn setup(chain: &RopeChain, policy: &SolverPolicy) -> Setup {
    let m = chain.segment_count();
    let mut dirs = Vec::with_capacity(m);
    let mut degenerate = 0;
    for i in 1..=m {
        let s = chain.segment_dir_len(i);
        if s.source != DirSource::Fresh {
            degenerate += 1;
        }
        dirs.push(s.dir);
    }
    let taut = chain.taut_flags(policy.taut_threshold);
    let couple = dirs.windows(2).map(|w| w[0].dot(w[1])).collect();
    Setup { dirs, taut, couple, degenerate }
}

/// Runs projected Gauss-Seidel sweeps over `values` (padded: index 0 and
/// `m + 1` are fixed zeros). `update(i, values)` returns the new value of
/// segment `i` before clamping.
fn gauss_seidel(
    values: &mut [f64],
    order: &[usize],
    taut: &[bool],
    policy: &SolverPolicy,
    mut update: impl FnMut(usize, &[f64]) -> f64,
) -> (usize, bool) {
    let (max_sweeps, tol) = match policy.mode {
        SweepMode::FixedSweeps(n) => (n, None),
        SweepMode::Tolerance(eps) => (policy.max_sweeps, Some(eps)),
    };
    for sweep in 1..=max_sweeps {
        let mut delta: f64 = 0.0;
        for &i in order {
            let new = if taut[i - 1] { update(i, values).max(0.0) } else { 0.0 };
            delta = delta.max((new - values[i]).abs());
            values[i] = new;
        }
        if let Some(eps) = tol {
            let scale = values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if delta <= eps * scale {
                return (sweep, true);
            }
        }
    }
    (max_sweeps, tol.is_none())
}

fn initial_values(m: usize, policy: &SolverPolicy, warm: Option<&SolveScratch>) -> Vec<f64> {
    let mut values = vec![0.0; m + 2];
    if policy.warm_start {
        if let Some(prev) = warm.filter(|p| p.magnitudes.len() == m) {
            values[1..=m].copy_from_slice(&prev.magnitudes);
        }
    }
    values
}

/// Tip-to-root projected Gauss-Seidel for the rope tensions.
///
/// `f_ext` holds one force per bone (entry 0, the root, is ignored) and
/// `root_accel` is the kinematic root acceleration.
pub fn solve_tensions(
    chain: &RopeChain,
    f_ext: &[Vec3],
    root_accel: Vec3,
    policy: &SolverPolicy,
    warm: Option<&SolveScratch>,
) -> SolveScratch {
    let m = chain.segment_count();
    debug_assert_eq!(f_ext.len(), m + 1);
    let Setup { dirs, taut, couple, degenerate } = setup(chain, policy);
    let fc: Vec<f64> = (1..=m)
        .map(|i| if taut[i - 1] { centripetal_magnitude(chain, i) } else { 0.0 })
        .collect();
    let mut values = initial_values(m, policy, warm);
    let order: Vec<usize> = (1..=m).rev().collect();
    let m1 = chain.mass(1);
    let (sweeps, converged) = gauss_seidel(&mut values, &order, &taut, policy, |i, t| {
        let d = dirs[i - 1];
        let below = if i < m { couple[i - 1] * t[i + 1] } else { 0.0 };
        if i == 1 {
            f_ext[1].dot(d) + fc[0] - m1 * root_accel.dot(d) + below
        } else {
            let above = couple[i - 2] * t[i - 1];
            ((f_ext[i] - f_ext[i - 1]).dot(d) + 2.0 * fc[i - 1] + above + below) * 0.5
        }
    });
    SolveScratch {
        magnitudes: values[1..=m].to_vec(),
        taut,
        dirs,
        sweeps,
        converged,
        degenerate_segments: degenerate,
    }
}

/// Net force on every bone from external forces and tensions. The root entry
/// is always zero.
pub fn net_forces(chain: &RopeChain, f_ext: &[Vec3], tensions: &SolveScratch) -> Vec<Vec3> {
    let m = chain.segment_count();
    let mut out = vec![Vec3::ZERO; m + 1];
    for i in 1..=m {
        let mut f = f_ext[i] - tensions.dirs[i - 1] * tensions.get(i);
        if i < m {
            f += tensions.dirs[i] * tensions.get(i + 1);
        }
        out[i] = f;
    }
    out
}

/// `v ← v + (dt/2)·F/M` for simulated bones; the root takes `root_velocity`.
pub fn velocity_half_step(chain: &mut RopeChain, f_net: &[Vec3], dt: f64, root_velocity: Vec3) {
    debug_assert!(dt > 0.0);
    chain.bones[0].velocity = root_velocity;
    for (bone, f) in chain.bones.iter_mut().zip(f_net).skip(1) {
        bone.velocity += *f * (0.5 * dt / bone.mass);
    }
}

/// Root-to-tip projected Gauss-Seidel for the rope impulses, using the
/// current velocities as the pre-impulse state. Velocities are not modified;
/// see [`apply_impulses`].
pub fn solve_impulses(
    chain: &RopeChain,
    policy: &SolverPolicy,
    warm: Option<&SolveScratch>,
) -> SolveScratch {
    let m = chain.segment_count();
    let Setup { dirs, taut, couple, degenerate } = setup(chain, policy);
    let rel: Vec<f64> = (1..=m)
        .map(|i| (chain.bones[i].velocity - chain.bones[i - 1].velocity).dot(dirs[i - 1]))
        .collect();
    let mut values = initial_values(m, policy, warm);
    let order: Vec<usize> = (1..=m).collect();
    let (sweeps, converged) = gauss_seidel(&mut values, &order, &taut, policy, |i, imp| {
        let mi = chain.mass(i);
        let below = if i < m { couple[i - 1] * imp[i + 1] / mi } else { 0.0 };
        if i == 1 {
            mi * (rel[0] + below)
        } else {
            let mp = chain.mass(i - 1);
            let reduced = mp * mi / (mp + mi);
            reduced * (rel[i - 1] + couple[i - 2] * imp[i - 1] / mp + below)
        }
    });
    SolveScratch {
        magnitudes: values[1..=m].to_vec(),
        taut,
        dirs,
        sweeps,
        converged,
        degenerate_segments: degenerate,
    }
}

/// Exchanges momentum along the ropes. The root velocity is untouched.
pub fn apply_impulses(chain: &mut RopeChain, impulses: &SolveScratch) {
    let m = chain.segment_count();
    for i in 1..=m {
        let mut dp = -impulses.dirs[i - 1] * impulses.get(i);
        if i < m {
            dp += impulses.dirs[i] * impulses.get(i + 1);
        }
        let bone = &mut chain.bones[i];
        bone.velocity += dp / bone.mass;
    }
}

/// [`solve_impulses`] followed by [`apply_impulses`].
pub fn resolve_impulses(
    chain: &mut RopeChain,
    policy: &SolverPolicy,
    warm: Option<&SolveScratch>,
) -> SolveScratch {
    let s = solve_impulses(chain, policy, warm);
    apply_impulses(chain, &s);
    s
}

/// Largest separating relative velocity `(v_i − v_{i−1})·l̂_i` over the taut
/// segments of `flags`, or `-inf` when none are taut.
pub fn max_separating_velocity(chain: &RopeChain, flags: &SolveScratch) -> f64 {
    (1..=chain.segment_count())
        .filter(|&i| flags.taut[i - 1])
        .map(|i| (chain.bones[i].velocity - chain.bones[i - 1].velocity).dot(flags.dirs[i - 1]))
        .fold(f64::NEG_INFINITY, f64::max)
}
