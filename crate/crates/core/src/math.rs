//! Small fixed-size linear algebra, generic over [`Real`] so the same
//! routines run in plain `f64` and on the gradient tape.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;

pub const VEC_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

pub type Vec3f = Vec3<f64>;

impl<T> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3 { x, y, z }
    }
}

impl<T: Real> Vec3<T> {
    pub fn zero() -> Self {
        Vec3::new(T::lit(0.0), T::lit(0.0), T::lit(0.0))
    }

    pub fn from_f64(v: Vec3<f64>) -> Self {
        Vec3::new(T::lit(v.x), T::lit(v.y), T::lit(v.z))
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2]))
    }

    pub fn value(self) -> Vec3<f64> {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        // norm_sq >= 0 up to rounding; clamp guards the sqrt domain without
        // disturbing the gradient.
        self.norm_sq().clamp_st(0.0, f64::INFINITY).sqrt()
    }

    pub fn scale(self, k: f64) -> Self {
        Vec3::new(self.x.scale(k), self.y.scale(k), self.z.scale(k))
    }

    pub fn mul_s(self, k: T) -> Self {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }

    /// Unit vector, or `None` when the norm is under [`VEC_EPS`]. The
    /// degenerate branch is decided on values; callers pick a fallback.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n.value() < VEC_EPS {
            None
        } else {
            Some(self.mul_s(T::lit(1.0) / n))
        }
    }

    /// Unit vector with a zero fallback for degenerate input.
    pub fn normalized_or_zero(self) -> Self {
        self.normalized().unwrap_or_else(Vec3::zero)
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        self.mul_s(k)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, k: T) -> Self {
        Vec3::new(self.x / k, self.y / k, self.z / k)
    }
}

/// Quaternion in (w, x, y, z) order. Rotations are represented by unit
/// quaternions; storage is unconstrained and normalized at use sites.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Quat { w, x, y, z }
    }

    pub fn identity() -> Self {
        Quat::new(T::lit(1.0), T::lit(0.0), T::lit(0.0), T::lit(0.0))
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2]), T::lit(a[3]))
    }

    pub fn value(self) -> [f64; 4] {
        [
            self.w.value(),
            self.x.value(),
            self.y.value(),
            self.z.value(),
        ]
    }

    pub fn norm(self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
            .clamp_st(0.0, f64::INFINITY)
            .sqrt()
    }

    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n.value() < VEC_EPS {
            return None;
        }
        let inv = T::lit(1.0) / n;
        Some(Quat::new(
            self.w * inv,
            self.x * inv,
            self.y * inv,
            self.z * inv,
        ))
    }

    /// Tangent frame of the unit quaternion: the first two rotation-matrix
    /// columns, with the third produced as their exact cross product so
    /// `t_w == t_u x t_v` holds bit for bit.
    pub fn to_frame(self) -> (Vec3<T>, Vec3<T>, Vec3<T>) {
        let Quat { w, x, y, z } = self;
        let two = 2.0;
        let t_u = Vec3::new(
            (y * y + z * z).scale(-two).shift(1.0),
            (x * y + w * z).scale(two),
            (x * z - w * y).scale(two),
        );
        let t_v = Vec3::new(
            (x * y - w * z).scale(two),
            (x * x + z * z).scale(-two).shift(1.0),
            (y * z + w * x).scale(two),
        );
        let t_w = t_u.cross(t_v);
        (t_u, t_v, t_w)
    }
}

/// Row-major 4x4, plain f64. Used for camera poses and the splat-to-world
/// affine map; no general inverse is needed anywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4 {
    pub m: [[f64; 4]; 4],
}

impl Mat4 {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Mat4 { m }
    }

    pub fn from_rows(m: [[f64; 4]; 4]) -> Self {
        Mat4 { m }
    }

    /// Affine map from basis columns and origin: x -> [c0 c1 c2] p + origin.
    pub fn from_columns(c0: Vec3f, c1: Vec3f, c2: Vec3f, origin: Vec3f) -> Self {
        Mat4 {
            m: [
                [c0.x, c1.x, c2.x, origin.x],
                [c0.y, c1.y, c2.y, origin.y],
                [c0.z, c1.z, c2.z, origin.z],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn mul(&self, o: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat4 { m: out }
    }

    pub fn apply_point(&self, p: Vec3f) -> Vec3f {
        let m = &self.m;
        Vec3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + m[0][3],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + m[1][3],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + m[2][3],
        )
    }

    pub fn apply_dir(&self, d: Vec3f) -> Vec3f {
        let m = &self.m;
        Vec3::new(
            m[0][0] * d.x + m[0][1] * d.y + m[0][2] * d.z,
            m[1][0] * d.x + m[1][1] * d.y + m[1][2] * d.z,
            m[2][0] * d.x + m[2][1] * d.y + m[2][2] * d.z,
        )
    }

    pub fn max_abs_diff(&self, o: &Mat4) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.m[i][j] - o.m[i][j]).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cross_follows_right_hand_rule() {
        let x: Vec3f = Vec3::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q: Quat<f64> = Quat::new(h, 0.0, 0.0, h);
        let (t_u, t_v, t_w) = q.to_frame();
        let tol = 1e-15;
        assert!((t_u.x - 0.0).abs() < tol && (t_u.y - 1.0).abs() < tol);
        assert!((t_v.x + 1.0).abs() < tol && (t_v.y - 0.0).abs() < tol);
        assert!((t_w.z - 1.0).abs() < tol);
    }

    #[test]
    fn degenerate_normalize_is_none() {
        let v: Vec3f = Vec3::new(0.0, 0.0, 0.0);
        assert!(v.normalized().is_none());
        assert_eq!(v.normalized_or_zero(), Vec3::zero());
        let q: Quat<f64> = Quat::new(0.0, 0.0, 0.0, 0.0);
        assert!(q.normalized().is_none());
    }

    #[test]
    fn affine_from_columns_round_trips_identity() {
        let m = Mat4::from_columns(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::zero(),
        );
        assert_eq!(m.max_abs_diff(&Mat4::identity()), 0.0);
    }

    proptest! {
        #[test]
        fn frames_of_unit_quaternions_are_orthonormal(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0
        ) {
            let q: Quat<f64> = Quat::new(w, x, y, z);
            prop_assume!(q.norm() > 1e-3);
            let q = q.normalized().unwrap();
            let (tu, tv, tw) = q.to_frame();
            let tol = 1e-12;
            prop_assert!((tu.norm() - 1.0).abs() < tol);
            prop_assert!((tv.norm() - 1.0).abs() < tol);
            prop_assert!((tw.norm() - 1.0).abs() < tol);
            prop_assert!(tu.dot(tv).abs() < tol);
            prop_assert!(tu.dot(tw).abs() < tol);
            prop_assert!(tv.dot(tw).abs() < tol);
            // Third axis is exactly the cross product by construction.
            let c = tu.cross(tv);
            prop_assert_eq!(c, tw);
        }

        #[test]
        fn normalized_vectors_have_unit_norm(
            x in -10.0f64..10.0, y in -10.0f64..10.0, z in -10.0f64..10.0
        ) {
            let v = Vec3::new(x, y, z);
            prop_assume!(v.norm() > 1e-6);
            let n = v.normalized().unwrap();
            prop_assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }
}
