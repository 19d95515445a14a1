//! Small 3D vector kernel shared by the simulation modules.
//!
//! Everything here is plain `f64` value types. Rotation is Rodrigues'
//! formula; there is no quaternion machinery because the simulation only
//! ever applies a single axis-angle rotation at a time.

use std::ops::{Add, AddAssign, Div, Index, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// World up. Used as the fallback direction wherever a direction is undefined.
pub const WORLD_UP: Vec3 = Vec3::new(0.0, 1.0, 0.0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector and length, or `None` when the length is below `min_len`.
    #[inline]
    pub fn dir_len(self, min_len: f64) -> Option<(Vec3, f64)> {
        let len = self.norm();
        if len < min_len || !len.is_finite() {
            None
        } else {
            Some((self / len, len))
        }
    }

    /// Normalized copy; `fallback` when the vector is (numerically) zero.
    #[inline]
    pub fn normalize_or(self, fallback: Vec3) -> Vec3 {
        self.dir_len(1e-300).map_or(fallback, |(d, _)| d)
    }

    #[inline]
    pub fn component_mul(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    #[inline]
    pub fn max_elem(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    #[inline]
    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Component of `self` orthogonal to the unit vector `n`.
    #[inline]
    pub fn reject(self, n: Vec3) -> Vec3 {
        self - n * self.dot(n)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl MulAssign<f64> for Vec3 {
    #[inline]
    fn mul_assign(&mut self, s: f64) {
        *self = *self * s;
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl std::iter::Sum for Vec3 {
    fn sum<I: Iterator<Item = Vec3>>(iter: I) -> Vec3 {
        iter.fold(Vec3::ZERO, Add::add)
    }
}

/// Row-major 3x3 matrix, used for rigid rotations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3 {
    pub rows: [Vec3; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        rows: [Vec3::X, Vec3::Y, Vec3::Z],
    };

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Self { rows: [r0, r1, r2] }
    }

    /// Rotation by `|rotvec|` radians about `rotvec / |rotvec|`.
    pub fn from_rotation_vector(rotvec: Vec3) -> Self {
        match rotvec.dir_len(1e-300) {
            None => Mat3::IDENTITY,
            Some((axis, angle)) => Mat3::from_axis_angle(axis, angle),
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let Vec3 { x, y, z } = axis;
        Mat3::from_rows(
            Vec3::new(t * x * x + c, t * x * y - s * z, t * x * z + s * y),
            Vec3::new(t * x * y + s * z, t * y * y + c, t * y * z - s * x),
            Vec3::new(t * x * z - s * y, t * y * z + s * x, t * z * z + c),
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let [a, b, c] = self.rows;
        Mat3::from_rows(
            Vec3::new(a.x, b.x, c.x),
            Vec3::new(a.y, b.y, c.y),
            Vec3::new(a.z, b.z, c.z),
        )
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.rows[0].dot(v), self.rows[1].dot(v), self.rows[2].dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let ot = o.transpose();
        let row = |r: Vec3| Vec3::new(r.dot(ot.rows[0]), r.dot(ot.rows[1]), r.dot(ot.rows[2]));
        Mat3::from_rows(row(self.rows[0]), row(self.rows[1]), row(self.rows[2]))
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                err = err.max((p.rows[i][j] - id).abs());
            }
        }
        err
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let [a, b, c] = self.rows;
        [a.x, a.y, a.z, b.x, b.y, b.z, c.x, c.y, c.z]
    }

    pub fn from_row_major(m: [f64; 9]) -> Mat3 {
        Mat3::from_rows(
            Vec3::new(m[0], m[1], m[2]),
            Vec3::new(m[3], m[4], m[5]),
            Vec3::new(m[6], m[7], m[8]),
        )
    }
}

impl Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        self.mul_vec(v)
    }
}

/// Rotate `v` by `theta` radians about the unit `axis` (right-hand rule).
pub fn rotate_about_axis(v: Vec3, axis: Vec3, theta: f64) -> Vec3 {
    debug_assert!(
        (axis.norm() - 1.0).abs() <= 1e-9,
        "rotation axis must be unit length, got |axis| = {}",
        axis.norm()
    );
    let (s, c) = theta.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

/// Coefficients of `a·s² + b·s + c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadraticCoeffs {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        (self.a * s + self.b) * s + self.c
    }
}

/// Largest root of `q` inside `[0, interval_end]`.
///
/// Uses the cancellation-free form of the quadratic formula. Roots that land
/// outside the interval by a few ulps are clamped back in. A degenerate
/// `0 = 0` quadratic has the whole interval as its root set, so the end of the
/// interval is returned.
pub fn largest_root_in_interval(q: QuadraticCoeffs, interval_end: f64) -> Option<f64> {
    debug_assert!(interval_end > 0.0, "interval end must be positive");
    let QuadraticCoeffs { a, b, c } = q;
    let slack = 1e-12 * interval_end.max(1e-300);
    let in_range = |s: f64| s.is_finite() && s >= -slack && s <= interval_end + slack;

    let mut roots = [f64::NAN; 2];
    if a == 0.0 {
        if b == 0.0 {
            return (c == 0.0).then_some(interval_end);
        }
        roots[0] = -c / b;
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t = -0.5 * (b + if b >= 0.0 { sq } else { -sq });
        if t == 0.0 {
            // b = 0 and c = 0: double root at zero.
            roots[0] = 0.0;
        } else {
            roots[0] = t / a;
            roots[1] = c / t;
        }
    }
    roots
        .into_iter()
        .filter(|&s| in_range(s))
        .map(|s| s.clamp(0.0, interval_end))
        .fold(None, |best: Option<f64>, s| Some(best.map_or(s, |b| b.max(s))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotate_about_axis(Vec3::X, Vec3::Z, FRAC_PI_2);
        assert!(close(r, Vec3::Y, 1e-15), "{r:?}");
    }

    #[test]
    fn zero_angle_is_identity() {
        let v = Vec3::new(0.3, -2.0, 7.5);
        assert_eq!(rotate_about_axis(v, Vec3::Y, 0.0), v);
    }

    #[test]
    fn two_half_turns_compose() {
        let axis = Vec3::new(1.0, 1.0, 1.0).normalize_or(Vec3::X);
        let v = Vec3::new(1.0, 2.0, 3.0);
        let full = rotate_about_axis(v, axis, 0.7);
        let halves = rotate_about_axis(rotate_about_axis(v, axis, 0.35), axis, 0.35);
        assert!(close(full, halves, 1e-14));
        assert!((full.norm() - v.norm()).abs() <= 1e-12 * v.norm());
    }

    #[test]
    fn rotation_matrix_matches_rodrigues() {
        let axis = Vec3::new(0.2, -0.5, 0.9).normalize_or(Vec3::X);
        let v = Vec3::new(-1.0, 0.4, 2.0);
        let m = Mat3::from_axis_angle(axis, 1.1);
        assert!(close(m * v, rotate_about_axis(v, axis, 1.1), 1e-14));
        assert!(m.orthonormality_error() < 1e-15);
    }

    #[test]
    fn unit_root() {
        assert_eq!(largest_root_in_interval(QuadraticCoeffs::new(1.0, 0.0, -1.0), 2.0), Some(1.0));
    }

    #[test]
    fn no_real_root() {
        assert_eq!(largest_root_in_interval(QuadraticCoeffs::new(1.0, 0.0, 1.0), 2.0), None);
    }

    #[test]
    fn planted_roots_pick_larger() {
        // 2.5·(s − 0.3)(s − 0.8)
        let q = QuadraticCoeffs::new(2.5, -2.5 * 1.1, 2.5 * 0.24);
        let r = largest_root_in_interval(q, 1.0).unwrap();
        assert!((r - 0.8).abs() < 1e-12, "{r}");
    }

    #[test]
    fn degenerate_quadratics() {
        assert_eq!(largest_root_in_interval(QuadraticCoeffs::new(0.0, 0.0, 1.0), 1.0), None);
        assert_eq!(largest_root_in_interval(QuadraticCoeffs::new(0.0, 0.0, 0.0), 0.5), Some(0.5));
        // Linear: 2s − 1 → 0.5
        assert_eq!(largest_root_in_interval(QuadraticCoeffs::new(0.0, 2.0, -1.0), 1.0), Some(0.5));
        // Linear root outside
        assert_eq!(largest_root_in_interval(QuadraticCoeffs::new(0.0, 2.0, -5.0), 1.0), None);
    }

    #[test]
    fn cancellation_prone_roots() {
        // Roots 1e-9 and 1.0; the naive formula loses the small root.
        let q = QuadraticCoeffs::new(1.0, -(1.0 + 1e-9), 1e-9);
        assert!((largest_root_in_interval(q, 0.5).unwrap() - 1e-9).abs() < 1e-20);
        assert!((largest_root_in_interval(q, 2.0).unwrap() - 1.0).abs() < 1e-15);
    }

    /// Brute-force scan for the largest sign change (or touching zero) of `q` on `[0, end]`.
    fn scan_largest_root(q: QuadraticCoeffs, end: f64, step: f64) -> Option<f64> {
        let n = (end / step).ceil() as usize;
        let mut best = None;
        for k in 0..n {
            let s0 = k as f64 * step;
            let s1 = ((k + 1) as f64 * step).min(end);
            if q.eval(s0) * q.eval(s1) <= 0.0 {
                best = Some(s1);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm_and_axis_component(
            v in prop::array::uniform3(-10.0f64..10.0),
            a in prop::array::uniform3(-1.0f64..1.0),
            theta in -7.0f64..7.0,
        ) {
            let v = Vec3::from(v);
            let axis = Vec3::from(a);
            prop_assume!(axis.norm() > 1e-3);
            let axis = axis.normalize_or(Vec3::X);
            let r = rotate_about_axis(v, axis, theta);
            prop_assert!((r.norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1.0));
            prop_assert!((r.dot(axis) - v.dot(axis)).abs() <= 1e-12 * v.norm().max(1.0));
        }

        #[test]
        fn returned_root_is_a_root(
            a in -10.0f64..10.0, b in -10.0f64..10.0, c in -10.0f64..10.0, end in 0.01f64..3.0,
        ) {
            let q = QuadraticCoeffs::new(a, b, c);
            if let Some(s) = largest_root_in_interval(q, end) {
                prop_assert!((0.0..=end).contains(&s));
                let scale = a.abs().max(b.abs()).max(c.abs()).max(1.0);
                prop_assert!(q.eval(s).abs() <= 1e-8 * scale, "q({}) = {}", s, q.eval(s));
            }
        }

        #[test]
        fn two_planted_roots_match_scan(
            r1 in 0.0f64..1.0, r2 in 0.0f64..1.0, lead in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        ) {
            prop_assume!((r1 - r2).abs() > 1e-3);
            let q = QuadraticCoeffs::new(lead, -lead * (r1 + r2), lead * r1 * r2);
            let got = largest_root_in_interval(q, 1.0).unwrap();
            let scan = scan_largest_root(q, 1.0, 1e-5).unwrap();
            prop_assert!((got - r1.max(r2)).abs() < 1e-9);
            prop_assert!((got - scan).abs() <= 1e-5 + 1e-12);
        }
    }
}
