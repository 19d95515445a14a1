//! External forces on virtual bones and the scripted root driver.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::rope::RopeChain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoneRef {
    pub chain: usize,
    pub bone: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForceSpec {
    /// `M·g` on every simulated bone.
    Gravity { g: Vec3 },
    /// `−c_wind·(v − v_wind)`.
    Wind {
        c_wind: f64,
        #[serde(default)]
        v_wind: Vec3,
    },
    /// Hookean spring between two bones, usually on neighbouring chains.
    /// A missing rest length is taken from the initial configuration.
    LateralSpring {
        a: BoneRef,
        b: BoneRef,
        stiffness: f64,
        #[serde(default)]
        rest_length: Option<f64>,
    },
    /// `−c·(v_i − v_{i−1})` on bone `i` only.
    RelativeDamping { coefficient: f64 },
    /// Accepted by the parser so scenes can name it, rejected by validation.
    RestAngle { stiffness: f64 },
}

impl ForceSpec {
    /// Checks coefficients and bone references against the chain layout
    /// (`bones_per_chain[c]` counts the root).
    pub fn validate(&self, bones_per_chain: &[usize]) -> Result<(), String> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be a finite value >= 0, got {v}"))
            }
        };
        let bone_exists = |r: &BoneRef| match bones_per_chain.get(r.chain) {
            None => Err(format!("lateral spring references missing chain {}", r.chain)),
            Some(&n) if r.bone >= n => {
                Err(format!("lateral spring references missing bone {} of chain {}", r.bone, r.chain))
            }
            _ => Ok(()),
        };
        match self {
            ForceSpec::Gravity { g } => {
                if g.is_finite() {
                    Ok(())
                } else {
                    Err("gravity must be finite".into())
                }
            }
            ForceSpec::Wind { c_wind, v_wind } => {
                nonneg("c_wind", *c_wind)?;
                if v_wind.is_finite() {
                    Ok(())
                } else {
                    Err("v_wind must be finite".into())
                }
            }
            ForceSpec::LateralSpring { a, b, stiffness, rest_length } => {
                nonneg("stiffness", *stiffness)?;
                if let Some(r) = rest_length {
                    nonneg("rest_length", *r)?;
                }
                bone_exists(a)?;
                bone_exists(b)?;
                if a == b {
                    return Err("lateral spring connects a bone to itself".into());
                }
                Ok(())
            }
            ForceSpec::RelativeDamping { coefficient } => nonneg("coefficient", *coefficient),
            ForceSpec::RestAngle { .. } => {
                Err("rest_angle forces are not supported: no force law is defined for them".into())
            }
        }
    }

    /// Fills a missing lateral-spring rest length from the current bone
    /// positions.
    pub fn resolve_rest_length(&mut self, chains: &[RopeChain]) {
        if let ForceSpec::LateralSpring { a, b, rest_length: rest @ None, .. } = self {
            let pa = chains[a.chain].bones[a.bone].position;
            let pb = chains[b.chain].bones[b.bone].position;
            *rest = Some((pa - pb).norm());
        }
    }
}

/// Sum of all gravity specs.
pub fn total_gravity(specs: &[ForceSpec]) -> Vec3 {
    specs
        .iter()
        .map(|s| match s {
            ForceSpec::Gravity { g } => *g,
            _ => Vec3::ZERO,
        })
        .sum()
}

/// External force on every bone of every chain; `out[c][0]` (the root) stays
/// zero. `out` is resized to match `chains`.
pub fn eval_external_forces(chains: &[RopeChain], specs: &[ForceSpec], out: &mut Vec<Vec<Vec3>>) {
    out.resize_with(chains.len(), Vec::new);
    for (f, chain) in out.iter_mut().zip(chains) {
        f.clear();
        f.resize(chain.bones.len(), Vec3::ZERO);
    }
    for spec in specs {
        match *spec {
            ForceSpec::Gravity { g } => {
                for (f, chain) in out.iter_mut().zip(chains) {
                    for (fi, bone) in f.iter_mut().zip(&chain.bones).skip(1) {
                        *fi += g * bone.mass;
                    }
                }
            }
            ForceSpec::Wind { c_wind, v_wind } => {
                for (f, chain) in out.iter_mut().zip(chains) {
                    for (fi, bone) in f.iter_mut().zip(&chain.bones).skip(1) {
                        *fi += (bone.velocity - v_wind) * -c_wind;
                    }
                }
            }
            ForceSpec::LateralSpring { a, b, stiffness, rest_length } => {
                let pa = chains[a.chain].bones[a.bone].position;
                let pb = chains[b.chain].bones[b.bone].position;
                let d = pb - pa;
                let len = d.norm();
                if len <= 0.0 {
                    continue;
                }
                // Force on `a`; `b` receives the exact negation.
                let fa = d * (stiffness * (len - rest_length.unwrap_or(len)) / len);
                if a.bone > 0 {
                    out[a.chain][a.bone] += fa;
                }
                if b.bone > 0 {
                    out[b.chain][b.bone] += -fa;
                }
            }
            ForceSpec::RelativeDamping { coefficient } => {
                for (f, chain) in out.iter_mut().zip(chains) {
                    for i in 1..chain.bones.len() {
                        f[i] += (chain.bones[i].velocity - chain.bones[i - 1].velocity) * -coefficient;
                    }
                }
            }
            ForceSpec::RestAngle { .. } => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverKey {
    pub t: f64,
    pub position: Vec3,
}

/// Root path through keyframes: piecewise cubic Hermite with tangents taken
/// from the parabola through each key and its neighbours. Linear and
/// quadratic paths are reproduced exactly, the curve is C¹ at the keys, and
/// positions are clamped outside the key range.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicDriver {
    pub keys: Vec<DriverKey>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverSample {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

impl KinematicDriver {
    pub fn fixed(position: Vec3) -> Self {
        Self { keys: vec![DriverKey { t: 0.0, position }] }
    }

    pub fn from_fn(times: impl IntoIterator<Item = f64>, f: impl Fn(f64) -> Vec3) -> Self {
        Self { keys: times.into_iter().map(|t| DriverKey { t, position: f(t) }).collect() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.keys.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err("driver key times must be strictly increasing".into());
        }
        if self.keys.iter().any(|k| !k.t.is_finite() || !k.position.is_finite()) {
            return Err("driver keys must be finite".into());
        }
        Ok(())
    }

    fn tangent(&self, j: usize) -> Vec3 {
        let k = &self.keys;
        let n = k.len();
        let slope = |a: usize| ((k[a + 1].position - k[a].position) / (k[a + 1].t - k[a].t), k[a + 1].t - k[a].t);
        if n == 2 {
            return slope(0).0;
        }
        if j == 0 {
            let ((d0, h0), (d1, h1)) = (slope(0), slope(1));
            (d0 * (2.0 * h0 + h1) - d1 * h0) / (h0 + h1)
        } else if j == n - 1 {
            let ((d0, h0), (d1, h1)) = (slope(n - 3), slope(n - 2));
            (d1 * (2.0 * h1 + h0) - d0 * h1) / (h0 + h1)
        } else {
            let ((d0, h0), (d1, h1)) = (slope(j - 1), slope(j));
            (d0 * h1 + d1 * h0) / (h0 + h1)
        }
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let k = &self.keys;
        match k.len() {
            0 => Vec3::ZERO,
            1 => k[0].position,
            n => {
                if t <= k[0].t {
                    return k[0].position;
                }
                if t >= k[n - 1].t {
                    return k[n - 1].position;
                }
                let j = k.partition_point(|key| key.t <= t) - 1;
                let h = k[j + 1].t - k[j].t;
                let s = (t - k[j].t) / h;
                let (s2, s3) = (s * s, s * s * s);
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                k[j].position * h00
                    + self.tangent(j) * (h10 * h)
                    + k[j + 1].position * h01
                    + self.tangent(j + 1) * (h11 * h)
            }
        }
    }

    /// Position at `t` with velocity and acceleration from central
    /// differences of stencil width `h`.
    pub fn sample(&self, t: f64, h: f64) -> DriverSample {
        debug_assert!(h > 0.0);
        let (xm, x0, xp) = (self.position(t - h), self.position(t), self.position(t + h));
        DriverSample {
            position: x0,
            velocity: (xp - xm) / (2.0 * h),
            acceleration: (xp - x0 * 2.0 + xm) / (h * h),
        }
    }
}

/// See [`KinematicDriver::sample`].
pub fn sample_driver(driver: &KinematicDriver, t: f64, h: f64) -> DriverSample {
    driver.sample(t, h)
}
