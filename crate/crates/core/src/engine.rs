//! Four-step central-differencing loop over every chain in a scene.
//!
//! Per step, with `t` the current time:
//! 1. tension solve, first velocity half-step, impulse solve;
//! 2. roots moved to their `t + dt` positions, position sweep, impulse solve;
//! 3. length and collision sweep, impulse solve;
//! 4. tension solve at the new positions, second half-step, impulse solve.
//!
//! Forces are evaluated for all chains at once (lateral springs couple them);
//! everything else runs chain-parallel.

use rayon::prelude::*;

use crate::collision::{collide_chain, BodyStep, ChainCollisionReport, CollisionBody, CollisionPolicy};
use crate::forces::{eval_external_forces, total_gravity, ForceSpec, KinematicDriver};
use crate::geometry::Vec3;
use crate::position::advance_positions;
use crate::rope::{
    net_forces, resolve_impulses, solve_tensions, velocity_half_step, RopeChain, SolveScratch,
    SolverPolicy,
};

/// How a chain root follows its driver: `root(t) = rest_root + driver(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RootBinding {
    pub driver: usize,
    pub rest_root: Vec3,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub bindings: Vec<RootBinding>,
    pub drivers: Vec<KinematicDriver>,
    pub bodies: Vec<CollisionBody>,
    pub forces: Vec<ForceSpec>,
    pub solver: SolverPolicy,
    pub collision: CollisionPolicy,
    pub dt: f64,
    pub frames: usize,
}

impl Scene {
    pub fn root_position(&self, chain: usize, t: f64) -> Vec3 {
        let b = &self.bindings[chain];
        b.rest_root + self.drivers[b.driver].position(t)
    }

    pub fn gravity(&self) -> Vec3 {
        total_gravity(&self.forces)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub time: f64,
    pub frame: usize,
    pub chains: Vec<RopeChain>,
    tension_warm: Vec<Option<SolveScratch>>,
    impulse_warm: Vec<Option<SolveScratch>>,
}

impl SimState {
    pub fn new(chains: Vec<RopeChain>, time: f64) -> Self {
        let n = chains.len();
        Self { time, frame: 0, chains, tension_warm: vec![None; n], impulse_warm: vec![None; n] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainFrame {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    /// Final (step 4) tension per segment.
    pub tensions: Vec<f64>,
    /// Final (step 4) impulse per segment.
    pub impulses: Vec<f64>,
    /// Smallest `φ` over all bodies per bone (`+inf` without bodies).
    pub phi: Vec<f64>,
    pub taut: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Tolerance-mode solves that hit the sweep cap.
    pub nonconverged_solves: usize,
    /// Segments whose direction came from the cache or the fallback.
    pub degenerate_segments: usize,
    /// Every solve of the step satisfied nonnegativity and complementarity.
    pub complementarity: bool,
    pub collision: ChainCollisionReport,
    /// Largest separating velocity on a taut segment after the final impulse solve.
    pub max_separating_velocity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub time: f64,
    pub chains: Vec<ChainFrame>,
    pub energy: f64,
    /// `max(0, −min φ)` over every bone.
    pub max_phi_violation: f64,
    /// Largest `l / l_max − 1` over every segment.
    pub max_stretch: f64,
    pub diagnostics: StepDiagnostics,
}

/// `Σ ½M|v|² − Σ M g·x` over simulated bones.
pub fn mechanical_energy(chains: &[RopeChain], gravity: Vec3) -> f64 {
    chains
        .iter()
        .flat_map(|c| c.bones.iter().skip(1))
        .map(|b| 0.5 * b.mass * b.velocity.norm_squared() - b.mass * gravity.dot(b.position))
        .sum()
}

struct ChainStep {
    tensions: SolveScratch,
    impulses: SolveScratch,
    nonconverged: usize,
    degenerate: usize,
    complementarity: bool,
    collision: ChainCollisionReport,
}

impl ChainStep {
    fn note(&mut self, s: &SolveScratch) {
        self.nonconverged += !s.converged as usize;
        self.degenerate += s.degenerate_segments;
        self.complementarity &= s.complementarity_holds();
    }
}

/// Advances `state` by one step and returns the record of the new frame.
pub fn step(scene: &Scene, state: &mut SimState) -> FrameRecord {
    let dt = scene.dt;
    let t0 = state.time;
    let t1 = t0 + dt;
    let solver = &scene.solver;
    let bodies: Vec<BodyStep<'_>> = scene.bodies.iter().map(|b| b.step(t0, dt)).collect();

    let mut f_ext = Vec::new();
    eval_external_forces(&state.chains, &scene.forces, &mut f_ext);

    let mut steps: Vec<ChainStep> = state
        .chains
        .par_iter_mut()
        .zip(f_ext.par_iter())
        .zip(state.tension_warm.par_iter())
        .zip(state.impulse_warm.par_iter())
        .enumerate()
        .map(|(c, (((chain, f), tw), iw))| {
            let binding = &scene.bindings[c];
            let driver = &scene.drivers[binding.driver];
            let x0_now = driver.sample(t0, dt);
            let root_next = binding.rest_root + driver.position(t1);
            let root_half_velocity = (root_next - chain.bones[0].position) / dt;
            let mut st = ChainStep {
                tensions: SolveScratch::zeros(chain.segment_count()),
                impulses: SolveScratch::zeros(chain.segment_count()),
                nonconverged: 0,
                degenerate: 0,
                complementarity: true,
                collision: ChainCollisionReport::default(),
            };

            // 1
            chain.bones[0].velocity = x0_now.velocity;
            let tens = solve_tensions(chain, f, x0_now.acceleration, solver, tw.as_ref());
            st.note(&tens);
            let fnet = net_forces(chain, f, &tens);
            velocity_half_step(chain, &fnet, dt, root_half_velocity);
            let imp = resolve_impulses(chain, solver, iw.as_ref());
            st.note(&imp);

            // 2
            let prev = chain.positions();
            chain.bones[0].position = root_next;
            advance_positions(chain, dt);
            let eps = scene.collision.epsilon;
            let near_body = chain.bones[1..]
                .iter()
                .any(|b| bodies.iter().any(|s| s.phi(b.position) < eps));
            if solver.post_position_impulse || near_body {
                let imp = resolve_impulses(chain, solver, iw.as_ref());
                st.note(&imp);
            }

            // 3
            if !bodies.is_empty() {
                st.collision = collide_chain(chain, &prev, &bodies, &scene.collision);
                if st.collision.collisions > 0 || st.collision.length_corrections > 0 {
                    let imp = resolve_impulses(chain, solver, iw.as_ref());
                    st.note(&imp);
                }
            }
            st
        })
        .collect();

    // 4
    eval_external_forces(&state.chains, &scene.forces, &mut f_ext);
    state
        .chains
        .par_iter_mut()
        .zip(f_ext.par_iter())
        .zip(steps.par_iter_mut())
        .zip(state.tension_warm.par_iter_mut())
        .zip(state.impulse_warm.par_iter_mut())
        .enumerate()
        .for_each(|(c, ((((chain, f), st), tw), iw))| {
            let driver = &scene.drivers[scene.bindings[c].driver];
            let x0_next = driver.sample(t1, dt);
            chain.bones[0].velocity = x0_next.velocity;
            let tens = solve_tensions(chain, f, x0_next.acceleration, solver, tw.as_ref());
            st.note(&tens);
            let fnet = net_forces(chain, f, &tens);
            velocity_half_step(chain, &fnet, dt, x0_next.velocity);
            let imp = resolve_impulses(chain, solver, iw.as_ref());
            st.note(&imp);
            chain.refresh_direction_cache();
            st.tensions = tens.clone();
            st.impulses = imp.clone();
            *tw = Some(tens);
            *iw = Some(imp);
        });

    state.time = t1;
    state.frame += 1;
    record(scene, state, &steps, &bodies)
}

fn record(scene: &Scene, state: &SimState, steps: &[ChainStep], bodies: &[BodyStep<'_>]) -> FrameRecord {
    let mut diag = StepDiagnostics { complementarity: true, max_separating_velocity: f64::NEG_INFINITY, ..Default::default() };
    let mut min_phi = f64::INFINITY;
    let mut max_stretch = f64::NEG_INFINITY;
    let chains = state
        .chains
        .iter()
        .zip(steps)
        .map(|(chain, st)| {
            diag.nonconverged_solves += st.nonconverged;
            diag.degenerate_segments += st.degenerate;
            diag.complementarity &= st.complementarity;
            diag.collision.merge(&st.collision);
            diag.max_separating_velocity = diag
                .max_separating_velocity
                .max(crate::rope::max_separating_velocity(chain, &st.impulses));
            max_stretch = max_stretch.max(chain.max_stretch());
            let phi: Vec<f64> = chain
                .bones
                .iter()
                .map(|b| bodies.iter().map(|s| s.phi(b.position)).fold(f64::INFINITY, f64::min))
                .collect();
            min_phi = phi.iter().skip(1).copied().fold(min_phi, f64::min);
            ChainFrame {
                positions: chain.positions(),
                velocities: chain.velocities(),
                tensions: st.tensions.magnitudes.clone(),
                impulses: st.impulses.magnitudes.clone(),
                phi,
                taut: st.impulses.taut.clone(),
            }
        })
        .collect();
    FrameRecord {
        frame: state.frame,
        time: state.time,
        chains,
        energy: mechanical_energy(&state.chains, scene.gravity()),
        max_phi_violation: (-min_phi).max(0.0),
        max_stretch,
        diagnostics: diag,
    }
}

/// Runs `scene.frames` steps from `state`, one record per step.
pub fn run(scene: &Scene, mut state: SimState) -> Vec<FrameRecord> {
    (0..scene.frames).map(|_| step(scene, &mut state)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvariantTolerances {
    pub stretch: f64,
    pub phi: f64,
}

impl Default for InvariantTolerances {
    fn default() -> Self {
        Self { stretch: 1e-9, phi: 1e-9 }
    }
}

/// Human-readable descriptions of every invariant the record breaks.
pub fn check_invariants(rec: &FrameRecord, tol: &InvariantTolerances) -> Vec<String> {
    let mut out = Vec::new();
    if rec.max_stretch > tol.stretch {
        out.push(format!("frame {}: segment stretched by {:.3e} of l_max", rec.frame, rec.max_stretch));
    }
    if rec.max_phi_violation > tol.phi {
        out.push(format!("frame {}: bone {:.3e} m inside a body", rec.frame, rec.max_phi_violation));
    }
    if !rec.diagnostics.complementarity {
        out.push(format!("frame {}: negative or slack tension/impulse", rec.frame));
    }
    let finite = rec.chains.iter().all(|c| {
        c.positions.iter().chain(&c.velocities).all(|v| v.is_finite())
            && c.tensions.iter().chain(&c.impulses).all(|v| v.is_finite())
    });
    if !finite {
        out.push(format!("frame {}: non-finite state", rec.frame));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{AnalyticSdf, SdfPrimitive};

    const G: Vec3 = Vec3::new(0.0, -9.81, 0.0);

    fn scene_for(chains: usize, dt: f64, frames: usize) -> Scene {
        Scene {
            bindings: vec![RootBinding { driver: 0, rest_root: Vec3::ZERO }; chains],
            drivers: vec![KinematicDriver::default()],
            bodies: vec![],
            forces: vec![ForceSpec::Gravity { g: G }],
            solver: SolverPolicy::tolerance(1e-10),
            collision: CollisionPolicy::default(),
            dt,
            frames,
        }
    }

    #[test]
    fn free_fall_velocity_is_exact() {
        let dt = 0.01;
        let scene = scene_for(1, dt, 37);
        let chain = RopeChain::new(&[Vec3::ZERO, Vec3::new(0.0, -0.1, 0.0)], vec![1e6], 1.0).unwrap();
        let recs = run(&scene, SimState::new(vec![chain], 0.0));
        let v = recs.last().unwrap().chains[0].velocities[1];
        assert!((v - G * (37.0 * dt)).norm() < 1e-12, "{v:?}");
        let y = recs.last().unwrap().chains[0].positions[1].y;
        let t = 37.0 * dt;
        assert!((y - (-0.1 + 0.5 * G.y * t * t)).abs() < 1e-12);
    }

    #[test]
    fn zero_frames_is_empty() {
        let scene = scene_for(1, 0.01, 0);
        let chain = RopeChain::new(&[Vec3::ZERO, Vec3::new(0.0, -1.0, 0.0)], vec![1.0], 1.0).unwrap();
        assert!(run(&scene, SimState::new(vec![chain], 0.0)).is_empty());
    }

    #[test]
    fn energy_reference_values() {
        let mut c = RopeChain::new(&[Vec3::ZERO, Vec3::ZERO], vec![1.0], 2.0).unwrap();
        assert_eq!(mechanical_energy(&[c.clone()], G), 0.0);
        c.bones[1].position.y = 1.5;
        assert!((mechanical_energy(&[c], G) - 2.0 * 9.81 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn chain_settles_on_sphere() {
        let mut scene = scene_for(1, 1.0 / 120.0, 2400);
        scene.bodies.push(CollisionBody::stationary(AnalyticSdf::new(vec![SdfPrimitive::Sphere {
            center: Vec3::new(0.0, -1.0, 0.0),
            radius: 0.5,
        }])));
        scene.forces.push(ForceSpec::RelativeDamping { coefficient: 0.5 });
        scene.forces.push(ForceSpec::Wind { c_wind: 0.05, v_wind: Vec3::ZERO });
        scene.collision.friction = 0.5;
        let pos: Vec<Vec3> = (0..=6).map(|k| Vec3::new(0.1 + 0.15 * k as f64, -0.3, 0.0)).collect();
        scene.bindings[0].rest_root = pos[0];
        let chain = RopeChain::new(&pos, vec![0.15; 6], 0.05).unwrap();
        let recs = run(&scene, SimState::new(vec![chain], 0.0));
        for r in &recs {
            assert!(check_invariants(r, &InvariantTolerances::default()).is_empty(), "{:?}", check_invariants(r, &InvariantTolerances::default()));
        }
        let n = recs.len();
        let drift = (recs[n - 1].energy - recs[n - 121].energy).abs();
        assert!(drift < 1e-4, "energy drift {drift} J/s");
    }

    #[test]
    fn reruns_are_bit_identical() {
        let mut scene = scene_for(3, 1.0 / 60.0, 120);
        scene.drivers[0] = KinematicDriver::from_fn((0..5).map(|k| k as f64 * 0.5), |t| Vec3::new(t.sin(), 0.0, 0.3 * t));
        scene.bodies.push(CollisionBody::stationary(AnalyticSdf::new(vec![SdfPrimitive::Capsule {
            p0: Vec3::new(-1.0, -0.8, 0.0),
            p1: Vec3::new(1.0, -0.8, 0.0),
            radius: 0.2,
        }])));
        scene.solver = SolverPolicy::sweeps(1);
        let chains: Vec<RopeChain> = (0..3)
            .map(|c| {
                let pos: Vec<Vec3> = (0..=5).map(|k| Vec3::new(0.2 * c as f64 + 0.2 * k as f64, 0.0, 0.0)).collect();
                RopeChain::new(&pos, vec![0.2; 5], 0.1).unwrap()
            })
            .collect();
        let a = run(&scene, SimState::new(chains.clone(), 0.0));
        let b = run(&scene, SimState::new(chains, 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn root_tracks_driver_exactly() {
        let mut scene = scene_for(1, 0.01, 50);
        scene.drivers[0] = KinematicDriver::from_fn([0.0, 0.2, 0.5, 0.7], |t| Vec3::new(t * t, 0.5 * t, 0.0));
        scene.bindings[0].rest_root = Vec3::new(0.0, 1.0, 0.0);
        let chain = RopeChain::new(&[Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.3, 1.0, 0.0)], vec![0.3], 1.0).unwrap();
        for r in run(&scene, SimState::new(vec![chain], 0.0)) {
            assert_eq!(r.chains[0].positions[0], scene.root_position(0, r.time));
        }
    }
}
