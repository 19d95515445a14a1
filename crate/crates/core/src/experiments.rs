//! Small reproducible experiments on the rope-chain solver.

use std::f64::consts::PI;

use crate::collision::{resolve_particle, AnalyticSdf, BodyMotion, CollisionBody, CollisionPolicy, SdfPrimitive};
use crate::engine::{run, step, RootBinding, Scene, SimState};
use crate::forces::{BoneRef, ForceSpec, KinematicDriver};
use crate::geometry::Vec3;
use crate::rope::{RopeChain, SolverPolicy};
use crate::scene::{ChainConfig, CollisionConfig, SceneConfig};

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Integrates `θ'' = −(g/l)·sin θ` with classic RK4 and returns `(θ, ω)` at
/// each multiple of `sample_dt` up to `samples`, using substeps no longer
/// than `max_step`.
pub fn rk4_pendulum(theta0: f64, omega0: f64, g_over_l: f64, sample_dt: f64, samples: usize, max_step: f64) -> Vec<(f64, f64)> {
    let sub = (sample_dt / max_step).ceil() as usize;
    let h = sample_dt / sub as f64;
    let f = |th: f64, om: f64| (om, -g_over_l * th.sin());
    let (mut th, mut om) = (theta0, omega0);
    let mut out = Vec::with_capacity(samples + 1);
    out.push((th, om));
    for _ in 0..samples {
        for _ in 0..sub {
            let k1 = f(th, om);
            let k2 = f(th + 0.5 * h * k1.0, om + 0.5 * h * k1.1);
            let k3 = f(th + 0.5 * h * k2.0, om + 0.5 * h * k2.1);
            let k4 = f(th + h * k3.0, om + h * k3.1);
            th += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            om += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        out.push((th, om));
    }
    out
}

/// Exact period of a pendulum released from rest at `theta0`, via the
/// arithmetic-geometric mean.
pub fn pendulum_period(length: f64, g: f64, theta0: f64) -> f64 {
    let (mut a, mut b) = (1.0f64, (theta0 * 0.5).cos());
    while (a - b).abs() > 1e-15 * a {
        (a, b) = (0.5 * (a + b), (a * b).sqrt());
    }
    2.0 * PI * (length / g).sqrt() / a
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendulumConfig {
    pub theta0: f64,
    pub length: f64,
    pub mass: f64,
    pub dt: f64,
    pub periods: f64,
    pub solver: SolverPolicy,
    pub oracle_step: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            theta0: 30f64.to_radians(),
            length: 1.0,
            mass: 1.0,
            dt: 1.0 / 600.0,
            periods: 5.0,
            solver: SolverPolicy::tolerance(1e-10),
            oracle_step: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumSample {
    pub t: f64,
    pub theta: f64,
    pub theta_oracle: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendulumReport {
    pub samples: Vec<PendulumSample>,
    pub period: f64,
    pub max_angle_error: f64,
    /// `max_angle_error / |θ0|` (zero for a zero release angle).
    pub relative_error: f64,
    /// Largest energy excursion within any one period, relative to the
    /// oscillation energy `M g l (1 − cos θ0)`.
    pub max_energy_drift_per_period: f64,
    /// Mean spacing of downward zero crossings of the simulated angle.
    pub measured_period: Option<f64>,
    pub max_stretch: f64,
}

/// Single rope, fixed root at the origin, released from rest at `theta0`
/// in the x-y plane.
pub fn pendulum_verify(cfg: &PendulumConfig) -> PendulumReport {
    let g = STANDARD_GRAVITY;
    let l = cfg.length;
    let bob = Vec3::new(l * cfg.theta0.sin(), -l * cfg.theta0.cos(), 0.0);
    let chain = RopeChain::new(&[Vec3::ZERO, bob], vec![l], cfg.mass).expect("valid pendulum");
    let period = pendulum_period(l, g, cfg.theta0);
    let frames = (cfg.periods * period / cfg.dt).ceil() as usize;
    let scene = Scene {
        bindings: vec![RootBinding { driver: 0, rest_root: Vec3::ZERO }],
        drivers: vec![KinematicDriver::default()],
        bodies: vec![],
        forces: vec![ForceSpec::Gravity { g: Vec3::new(0.0, -g, 0.0) }],
        solver: cfg.solver,
        collision: CollisionPolicy::default(),
        dt: cfg.dt,
        frames,
    };
    let mut state = SimState::new(vec![chain], 0.0);
    let oracle = rk4_pendulum(cfg.theta0, 0.0, g / l, cfg.dt, frames, cfg.oracle_step);
    let angle = |p: Vec3| p.x.atan2(-p.y);
    let energy0 = crate::engine::mechanical_energy(&state.chains, scene.gravity());
    let mut samples = vec![PendulumSample { t: 0.0, theta: cfg.theta0, theta_oracle: cfg.theta0, energy: energy0 }];
    let mut max_stretch: f64 = 0.0;
    for (n, &(theta_oracle, _)) in oracle.iter().enumerate().skip(1) {
        let rec = step(&scene, &mut state);
        max_stretch = max_stretch.max(rec.max_stretch);
        samples.push(PendulumSample {
            t: n as f64 * cfg.dt,
            theta: angle(rec.chains[0].positions[1]),
            theta_oracle,
            energy: rec.energy,
        });
    }
    let max_angle_error = samples.iter().map(|s| (s.theta - s.theta_oracle).abs()).fold(0.0, f64::max);
    let relative_error = if cfg.theta0 != 0.0 { max_angle_error / cfg.theta0.abs() } else { 0.0 };

    let e_osc = cfg.mass * g * l * (1.0 - cfg.theta0.cos());
    let per_period = (period / cfg.dt).round().max(1.0) as usize;
    let max_energy_drift_per_period = if e_osc > 0.0 {
        samples
            .chunks(per_period)
            .map(|w| {
                let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.energy), hi.max(s.energy)));
                (hi - lo) / e_osc
            })
            .fold(0.0, f64::max)
    } else {
        0.0
    };

    let crossings: Vec<f64> = samples
        .windows(2)
        .filter(|w| w[0].theta > 0.0 && w[1].theta <= 0.0)
        .map(|w| w[0].t + (w[1].t - w[0].t) * w[0].theta / (w[0].theta - w[1].theta))
        .collect();
    let measured_period = (crossings.len() >= 2)
        .then(|| (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64);

    PendulumReport {
        samples,
        period,
        max_angle_error,
        relative_error,
        max_energy_drift_per_period,
        measured_period,
        max_stretch,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationsConfig {
    pub bones: usize,
    pub segment_length: f64,
    pub mass: f64,
    pub dt: f64,
    pub duration: f64,
    /// Amplitude window `[duration − window, duration]`.
    pub window: f64,
}

impl Default for IterationsConfig {
    fn default() -> Self {
        Self { bones: 8, segment_length: 0.1, mass: 0.05, dt: 1.0 / 60.0, duration: 3.0, window: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationsEntry {
    pub label: String,
    pub policy: SolverPolicy,
    pub amplitude: f64,
}

/// Swings a chain released from horizontal under each policy and measures
/// the largest horizontal tip offset from the root over the final window.
pub fn iterations_study(cfg: &IterationsConfig, policies: &[(String, SolverPolicy)]) -> Vec<IterationsEntry> {
    let pos: Vec<Vec3> = (0..=cfg.bones).map(|k| Vec3::new(cfg.segment_length * k as f64, 0.0, 0.0)).collect();
    let chain = RopeChain::new(&pos, vec![cfg.segment_length; cfg.bones], cfg.mass).expect("valid chain");
    let frames = (cfg.duration / cfg.dt).round() as usize;
    policies
        .iter()
        .map(|(label, policy)| {
            let scene = Scene {
                bindings: vec![RootBinding { driver: 0, rest_root: Vec3::ZERO }],
                drivers: vec![KinematicDriver::default()],
                bodies: vec![],
                forces: vec![ForceSpec::Gravity { g: Vec3::new(0.0, -STANDARD_GRAVITY, 0.0) }],
                solver: *policy,
                collision: CollisionPolicy::default(),
                dt: cfg.dt,
                frames,
            };
            let recs = run(&scene, SimState::new(vec![chain.clone()], 0.0));
            let start = cfg.duration - cfg.window;
            let amplitude = recs
                .iter()
                .filter(|r| r.time >= start - 1e-9)
                .map(|r| r.chains[0].positions[cfg.bones].x.abs())
                .fold(0.0, f64::max);
            IterationsEntry { label: label.clone(), policy: *policy, amplitude }
        })
        .collect()
}

/// The policy list of the damping comparison: 1, 5, 10 sweeps and a
/// `1e-6` tolerance.
pub fn default_iteration_policies() -> Vec<(String, SolverPolicy)> {
    vec![
        ("1".into(), SolverPolicy::sweeps(1)),
        ("5".into(), SolverPolicy::sweeps(5)),
        ("10".into(), SolverPolicy::sweeps(10)),
        ("tol1e-6".into(), SolverPolicy::tolerance(1e-6)),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PushoutDemoConfig {
    pub radius: f64,
    pub speed: f64,
    pub dt: f64,
    pub duration: f64,
    /// Sphere center at `t = 0`; it moves along +x.
    pub start: Vec3,
    /// Lateral offsets of the particles (y), all starting at `x = 0`.
    pub offsets: Vec<f64>,
}

impl Default for PushoutDemoConfig {
    fn default() -> Self {
        Self {
            radius: 0.5,
            speed: 2.0,
            dt: 1.0 / 60.0,
            duration: 2.0,
            start: Vec3::new(-1.0, 0.0, 0.0),
            offsets: vec![-0.3, -0.25, -0.2, 0.2, 0.25, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PushoutTrack {
    pub offset: f64,
    /// `(t, angle from the motion axis in degrees, x, y, z)` while touched,
    /// i.e. from first contact on.
    pub samples: Vec<(f64, f64, Vec3)>,
    pub max_angle: f64,
    pub contacted: bool,
}

/// Free particles at rest in the path of a translating sphere; returns one
/// track per particle. The angle is measured at the sphere center between
/// the particle and the motion direction.
pub fn pushout_demo(cfg: &PushoutDemoConfig, policy: &CollisionPolicy) -> Vec<PushoutTrack> {
    let body = CollisionBody {
        sdf: AnalyticSdf::new(vec![SdfPrimitive::Sphere { center: Vec3::ZERO, radius: cfg.radius }]),
        motion: BodyMotion::translating(cfg.start, Vec3::new(cfg.speed, 0.0, 0.0), 0.0, cfg.duration),
    };
    let steps = (cfg.duration / cfg.dt).round() as usize;
    cfg.offsets
        .iter()
        .map(|&offset| {
            let mut x = Vec3::new(0.0, offset, 0.0);
            let mut v = Vec3::ZERO;
            let mut track = PushoutTrack { offset, samples: Vec::new(), max_angle: 0.0, contacted: false };
            for n in 0..steps {
                let t = n as f64 * cfg.dt;
                let bs = body.step(t, cfg.dt);
                let predicted = x + v * cfg.dt;
                let out = resolve_particle(x, predicted, v, &bs, policy);
                x = out.position;
                v = out.velocity;
                track.contacted |= out.collided;
                if track.contacted {
                    let c = bs.pose_np1.translation;
                    let angle = (x - c).normalize_or(Vec3::X).dot(Vec3::X).clamp(-1.0, 1.0).acos().to_degrees();
                    track.max_angle = track.max_angle.max(angle);
                    track.samples.push((t + cfg.dt, angle, x));
                }
            }
            track
        })
        .collect()
}

/// Randomized stress scene: five 8-bone chains hanging from a bar that
/// wanders on a smooth seeded path, a sphere in front of the chains and a
/// capsule behind them, lateral springs, wind and jittered start velocities.
pub fn soak_scene(seed: u64, frames: usize, solver: SolverPolicy) -> SceneConfig {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (chains_n, bones, seg) = (5usize, 8usize, 0.1);
    let dt = 1.0 / 60.0;
    let chains: Vec<ChainConfig> = (0..chains_n)
        .map(|c| ChainConfig {
            positions: (0..=bones)
                .map(|k| Vec3::new(-0.2 + 0.1 * c as f64, 1.0 - seg * k as f64, 0.0))
                .collect(),
            max_lengths: None,
            mass: 0.05,
            masses: None,
            driver: 0,
            velocities: None,
        })
        .collect();

    let mut wave = || {
        let amp = rng.gen_range(0.5..1.0);
        let freq = rng.gen_range(0.3..0.9);
        let phase = rng.gen_range(0.0..2.0 * PI);
        move |t: f64| amp * ((2.0 * PI * freq * t + phase).sin() - phase.sin())
    };
    let (wx, wy, wz) = (wave(), wave(), wave());
    let duration = frames as f64 * dt;
    let key_dt = 0.05;
    let n_keys = (duration / key_dt).ceil() as usize + 2;
    let driver = KinematicDriver::from_fn((0..n_keys).map(|k| k as f64 * key_dt), |t| {
        Vec3::new(0.25 * wx(t), 0.1 * wy(t), 0.35 * wz(t))
    });

    let mut forces = vec![
        ForceSpec::Gravity { g: Vec3::new(0.0, -STANDARD_GRAVITY, 0.0) },
        ForceSpec::Wind { c_wind: 0.01, v_wind: Vec3::new(rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0)) },
        ForceSpec::RelativeDamping { coefficient: 0.002 },
    ];
    for c in 0..chains_n - 1 {
        for bone in 1..=bones {
            forces.push(ForceSpec::LateralSpring {
                a: BoneRef { chain: c, bone },
                b: BoneRef { chain: c + 1, bone },
                stiffness: 2.0,
                rest_length: None,
            });
        }
    }

    let bodies = vec![
        CollisionBody::stationary(AnalyticSdf::new(vec![SdfPrimitive::Sphere {
            center: Vec3::new(0.0, 0.45, 0.32),
            radius: 0.25,
        }])),
        CollisionBody::stationary(AnalyticSdf::new(vec![SdfPrimitive::Capsule {
            p0: Vec3::new(-0.6, 0.55, -0.25),
            p1: Vec3::new(0.6, 0.45, -0.25),
            radius: 0.12,
        }])),
    ];

    SceneConfig {
        dt,
        frames,
        start_time: 0.0,
        drivers: vec![driver],
        chains,
        bodies,
        forces,
        solver,
        collision: CollisionConfig::default(),
        velocity_jitter: 0.05,
        output_csv: None,
    }
}
