//! Root-to-tip position sweep.
//!
//! A bone moves ballistically while its rope stays slack. Once the rope would
//! overstretch, the bone moves freely up to the moment the rope becomes taut
//! and then travels the remaining time along a great circle of the sphere
//! around its (already updated) parent, covering the full arc length
//! `|v_T|·(dt − s_root)`. Velocities are left alone; the impulse solve that
//! follows reconciles them with the new positions.

use serde::{Deserialize, Serialize};

use crate::geometry::{largest_root_in_interval, rotate_about_axis, QuadraticCoeffs};
use crate::rope::{RopeChain, DEGENERATE_LENGTH};

/// Tangential speeds below this leave a taut bone where it is.
pub const MIN_TANGENTIAL_SPEED: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionBranch {
    Slack,
    TautRotated,
    ProjectedThenRotated,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositionStepReport {
    /// Branch per segment; entry `k` is segment `k + 1`.
    pub branches: Vec<PositionBranch>,
    /// Time at which each taut segment became taut, in `[0, dt]` (`dt` for slack ones).
    pub s_root: Vec<f64>,
}

/// Advances every simulated bone from `x^n` to `x^{n+1}` using its current
/// (half-step) velocity. The root must already sit at its `t^{n+1}` position.
pub fn advance_positions(chain: &mut RopeChain, dt: f64) -> PositionStepReport {
    debug_assert!(dt > 0.0);
    let m = chain.segment_count();
    let mut report = PositionStepReport {
        branches: Vec::with_capacity(m),
        s_root: Vec::with_capacity(m),
    };
    for i in 1..=m {
        let l_max = chain.max_length(i);
        let cached = chain.segment_dir_len(i).dir;
        let parent = chain.bones[i - 1].position;
        let bone = &mut chain.bones[i];
        let v = bone.velocity;
        let rel = bone.position - parent;

        let q = QuadraticCoeffs::new(v.norm_squared(), 2.0 * rel.dot(v), rel.norm_squared() - l_max * l_max);
        if q.eval(dt) <= 0.0 {
            bone.position += v * dt;
            report.branches.push(PositionBranch::Slack);
            report.s_root.push(dt);
            continue;
        }

        let (s_root, branch, start) = match largest_root_in_interval(q, dt) {
            Some(s) => (s, PositionBranch::TautRotated, rel + v * s),
            // Already overstretched with no way back inside the step: pull
            // x^n onto the sphere and rotate for the whole step.
            None => (0.0, PositionBranch::ProjectedThenRotated, rel),
        };
        // The segment is taut at s_root; pin its length to exactly l_max.
        let dir = start.dir_len(DEGENERATE_LENGTH).map_or(cached, |(d, _)| d);
        let mut seg = dir * l_max;

        let v_t = v.reject(dir);
        if let Some((t_dir, speed)) = v_t.dir_len(MIN_TANGENTIAL_SPEED) {
            let theta = speed * (dt - s_root) / l_max;
            let axis = dir.cross(t_dir);
            seg = rotate_about_axis(seg, axis.normalize_or(axis), theta);
        }
        bone.position = parent + seg;
        report.branches.push(branch);
        report.s_root.push(s_root);
    }
    report
}

/// Evolve-and-project: move ballistically, then pull overstretched bones
/// radially back onto the sphere. Kept as the baseline the great-circle
/// update is compared against.
pub fn advance_positions_evolve_project(chain: &mut RopeChain, dt: f64) {
    for i in 1..=chain.segment_count() {
        let l_max = chain.max_length(i);
        let parent = chain.bones[i - 1].position;
        let bone = &mut chain.bones[i];
        bone.position += bone.velocity * dt;
        let rel = bone.position - parent;
        if rel.norm() > l_max {
            bone.position = parent + rel * (l_max / rel.norm());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn single(x: Vec3, v: Vec3, l_max: f64) -> RopeChain {
        let mut c = RopeChain::new(&[Vec3::ZERO, x], vec![l_max], 1.0).unwrap();
        c.bones[1].velocity = v;
        c
    }

    #[test]
    fn slack_moves_ballistically() {
        let v = Vec3::new(0.1, -0.2, 0.05);
        let mut c = single(Vec3::new(0.0, -0.5, 0.0), v, 1.0);
        let r = advance_positions(&mut c, 0.1);
        assert_eq!(r.branches, vec![PositionBranch::Slack]);
        assert_eq!(c.bones[1].position, Vec3::new(0.0, -0.5, 0.0) + v * 0.1);
    }

    #[test]
    fn taut_tangential_motion_follows_great_circle() {
        let (l, u, dt) = (0.7, 2.0, 0.05);
        let mut c = single(Vec3::new(l, 0.0, 0.0), Vec3::new(0.0, u, 0.0), l);
        let r = advance_positions(&mut c, dt);
        assert_eq!(r.branches, vec![PositionBranch::TautRotated]);
        assert!(r.s_root[0].abs() < 1e-15);
        let theta = u * dt / l;
        let expected = Vec3::new(theta.cos(), theta.sin(), 0.0) * l;
        assert!((c.bones[1].position - expected).norm() < 1e-14);
        assert!((c.length(1) - l).abs() < 1e-15);
    }

    #[test]
    fn overstretched_start_is_projected() {
        let l = 1.0;
        let mut c = single(Vec3::new(1.2, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0), l);
        let r = advance_positions(&mut c, 0.1);
        assert_eq!(r.branches, vec![PositionBranch::ProjectedThenRotated]);
        assert_eq!(r.s_root, vec![0.0]);
        assert!((c.bones[1].position - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn partial_step_then_rotation() {
        // Starts slack at radius 0.9 moving outward and sideways; taut mid-step.
        let (l, dt) = (1.0, 0.1);
        let v = Vec3::new(2.0, 1.0, 0.0);
        let mut c = single(Vec3::new(0.9, 0.0, 0.0), v, l);
        let r = advance_positions(&mut c, dt);
        assert_eq!(r.branches, vec![PositionBranch::TautRotated]);
        let s = r.s_root[0];
        assert!(s > 0.0 && s < dt);
        let at_root = Vec3::new(0.9, 0.0, 0.0) + v * s;
        assert!((at_root.norm() - l).abs() < 1e-12);
        assert!((c.length(1) - l).abs() < 1e-14);
        // Arc covered after s_root equals tangential speed times remaining time.
        let d = at_root / at_root.norm();
        let vt = (v - d * v.dot(d)).norm();
        let angle = (c.bones[1].position.dot(at_root) / (l * l)).clamp(-1.0, 1.0).acos();
        assert!((angle * l - vt * (dt - s)).abs() < 1e-12);
    }

    #[test]
    fn radial_only_motion_rests_on_sphere() {
        let mut c = single(Vec3::new(0.0, -1.0, 0.0), Vec3::new(0.0, -3.0, 0.0), 1.0);
        advance_positions(&mut c, 0.1);
        assert!((c.bones[1].position - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn evolve_and_project_loses_arc_length() {
        let (l, u, dt) = (1.0, 3.0, 0.05);
        let mut exact = single(Vec3::new(l, 0.0, 0.0), Vec3::new(0.0, u, 0.0), l);
        let mut naive = exact.clone();
        advance_positions(&mut exact, dt);
        advance_positions_evolve_project(&mut naive, dt);
        let arc = |p: Vec3| (p.x / l).clamp(-1.0, 1.0).acos() * l;
        let exact_arc = arc(exact.bones[1].position);
        let naive_arc = arc(naive.bones[1].position);
        assert!((exact_arc - u * dt).abs() <= 1e-10 * u * dt);
        assert!(naive_arc < exact_arc - 1e-6, "{naive_arc} vs {exact_arc}");
    }

    #[test]
    fn unbounded_rope_is_pure_ballistics() {
        let pos = [Vec3::ZERO, Vec3::new(0.1, -0.3, 0.0), Vec3::new(0.2, -0.7, 0.1)];
        let mut c = RopeChain::new(&pos, vec![f64::MAX.sqrt() / 4.0; 2], 1.0).unwrap();
        c.bones[1].velocity = Vec3::new(3.0, -1.0, 2.0);
        c.bones[2].velocity = Vec3::new(-5.0, 4.0, 0.5);
        let dt = 0.013;
        let expected: Vec<Vec3> = c.bones.iter().map(|b| b.position + b.velocity * dt).collect();
        c.bones[0].position = expected[0];
        advance_positions(&mut c, dt);
        for (b, e) in c.bones.iter().zip(&expected) {
            assert_eq!(b.position, *e);
        }
    }

    proptest! {
        #[test]
        fn sweep_never_overstretches(
            segs in prop::collection::vec((prop::array::uniform3(-1.0f64..1.0), 0.05f64..0.5, 0.3f64..1.3), 1..8),
            vels in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 8),
            root_shift in prop::array::uniform3(-0.2f64..0.2),
            dt in 0.001f64..0.05,
        ) {
            let mut pos = vec![Vec3::ZERO];
            let mut lmax = Vec::new();
            for (d, l, frac) in &segs {
                let d = Vec3::from(*d).normalize_or(Vec3::Y);
                pos.push(*pos.last().unwrap() + d * (l * frac));
                lmax.push(*l);
            }
            let mut c = RopeChain::new(&pos, lmax, 0.1).unwrap();
            for (b, v) in c.bones.iter_mut().skip(1).zip(&vels) {
                b.velocity = Vec3::from(*v);
            }
            c.bones[0].position += Vec3::from(root_shift);
            let r = advance_positions(&mut c, dt);
            for i in 1..=c.segment_count() {
                prop_assert!(c.length(i) <= c.max_length(i) * (1.0 + 1e-9));
                prop_assert!((0.0..=dt).contains(&r.s_root[i - 1]));
            }
        }
    }
}
