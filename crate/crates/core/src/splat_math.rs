//! Surfel geometry: oriented 2D Gaussians embedded in 3D, exact ray-plane
//! intersection, mirror reflection, and spherical-harmonic color.
//!
//! A surfel's local frame comes from its unit quaternion; `t_u`/`t_v` span
//! the disk, `t_w = t_u x t_v` is the exact normal. Points on the plane are
//! `center + s_u * t_u * u + s_v * t_v * v`, weighted by
//! `exp(-(u^2 + v^2) / 2)`.

use crate::autodiff::Real;
use crate::math::{Mat4, Quat, Vec3, Vec3f};
use crate::{Error, Result};

/// Rays with `|d . t_w|` below this are treated as parallel to the plane
/// and produce no hit.
pub const GRAZE_EPS: f64 = 1e-12;

/// Floor applied to activated scales so the plane parameterization stays
/// invertible.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Raw logits are clamped (straight-through) to keep sigmoid outputs in
/// the open interval and its derivative nonzero.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Default Gaussian weight cutoff: hits fainter than this are discarded.
pub fn default_cutoff() -> f64 {
    (-4.5f64).exp()
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Number of SH coefficients per channel for a given degree.
pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3f,
    pub dir: Vec3f,
    /// Hits must satisfy `t_min < t < t_max`.
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: Vec3f, dir: Vec3f) -> Self {
        Ray {
            origin,
            dir,
            t_min: 0.0,
            t_max: f64::INFINITY,
        }
    }

    pub fn at(&self, t: f64) -> Vec3f {
        self.origin + self.dir.scale(t)
    }
}

/// Splat parameters in raw (unconstrained) space, before activation.
/// `tint_logit` is `None` for environment splats, which have no specular
/// response of their own.
#[derive(Clone, Debug)]
pub struct RawSplat<T> {
    pub center: Vec3<T>,
    pub rotation: Quat<T>,
    pub log_scale: [T; 2],
    pub opacity_logit: T,
    pub tint_logit: Option<T>,
    /// `[coeff][channel]`, coefficient-major.
    pub sh: Vec<[T; 3]>,
}

/// Activated, render-ready splat. Invariants: the frame is orthonormal
/// with `t_w = t_u x t_v` exactly, scales are at least [`SCALE_FLOOR`],
/// `alpha` and `tint` lie in (0, 1) (tint is 0 for environment splats).
#[derive(Clone, Debug)]
pub struct Surfel<T> {
    pub center: Vec3<T>,
    pub t_u: Vec3<T>,
    pub t_v: Vec3<T>,
    pub t_w: Vec3<T>,
    pub scale: [T; 2],
    pub alpha: T,
    pub tint: T,
    pub sh: Vec<[T; 3]>,
}

impl<T: Real> RawSplat<T> {
    /// Applies all activations. The rotation is normalized here (identity
    /// fallback when degenerate), so callers may hand in any quaternion.
    pub fn activate(&self) -> Surfel<T> {
        let q = self
            .rotation
            .normalized()
            .unwrap_or_else(Quat::identity);
        let (t_u, t_v, t_w) = q.to_frame();
        let scale = [
            self.log_scale[0].exp().clamp_st(SCALE_FLOOR, f64::INFINITY),
            self.log_scale[1].exp().clamp_st(SCALE_FLOOR, f64::INFINITY),
        ];
        let alpha = self
            .opacity_logit
            .clamp_st(-LOGIT_CLAMP, LOGIT_CLAMP)
            .sigmoid();
        let tint = match self.tint_logit {
            Some(t) => t.clamp_st(-LOGIT_CLAMP, LOGIT_CLAMP).sigmoid(),
            None => T::lit(0.0),
        };
        Surfel {
            center: self.center,
            t_u,
            t_v,
            t_w,
            scale,
            alpha,
            tint,
            sh: self.sh.clone(),
        }
    }
}

impl<T: Real> Surfel<T> {
    pub fn values(&self) -> Surfel<f64> {
        Surfel {
            center: self.center.value(),
            t_u: self.t_u.value(),
            t_v: self.t_v.value(),
            t_w: self.t_w.value(),
            scale: [self.scale[0].value(), self.scale[1].value()],
            alpha: self.alpha.value(),
            tint: self.tint.value(),
            sh: self
                .sh
                .iter()
                .map(|c| [c[0].value(), c[1].value(), c[2].value()])
                .collect(),
        }
    }

    pub fn sh_degree(&self) -> usize {
        match self.sh.len() {
            1 => 0,
            4 => 1,
            9 => 2,
            n => panic!("unsupported SH coefficient count {}", n),
        }
    }
}

impl Surfel<f64> {
    /// Axis-aligned bounds of the local disk of the given radius: per axis
    /// the disk spans `center +- radius * hypot(s_u * t_u[a], s_v * t_v[a])`.
    pub fn aabb_scaled(&self, radius: f64) -> ([f64; 3], [f64; 3]) {
        let c = [self.center.x, self.center.y, self.center.z];
        let tu = [self.t_u.x, self.t_u.y, self.t_u.z];
        let tv = [self.t_v.x, self.t_v.y, self.t_v.z];
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            let r = radius * (self.scale[0] * tu[a]).hypot(self.scale[1] * tv[a]);
            lo[a] = c[a] - r;
            hi[a] = c[a] + r;
        }
        (lo, hi)
    }

    /// Bounds of the 3-sigma disk, the support implied by the default
    /// Gaussian cutoff.
    pub fn aabb_3sigma(&self) -> ([f64; 3], [f64; 3]) {
        self.aabb_scaled(3.0)
    }
}

/// Radius in local units within which weights stay at or above `cutoff`.
/// Cutoffs of 1 and above collapse the support to the center point.
pub fn cutoff_radius(cutoff: f64) -> f64 {
    (-2.0 * cutoff.min(1.0).ln()).max(0.0).sqrt()
}

/// Point on the splat plane at local coordinates (u, v).
pub fn plane_point<T: Real>(s: &Surfel<T>, u: T, v: T) -> Vec3<T> {
    s.center + s.t_u.mul_s(s.scale[0] * u) + s.t_v.mul_s(s.scale[1] * v)
}

/// Unnormalized Gaussian: 1 at the center, `exp(-r^2/2)` at radius r.
pub fn gaussian_weight<T: Real>(u: T, v: T) -> T {
    (-(u * u + v * v)).scale(0.5).exp()
}

pub fn splat_normal<T: Real>(s: &Surfel<T>) -> Vec3<T> {
    s.t_w
}

/// Mirror reflection `d - 2 (d . n) n`. Preserves length; a grazing
/// direction (`d . n == 0`) comes back unchanged.
pub fn reflect<T: Real>(d: Vec3<T>, n: Vec3<T>) -> Vec3<T> {
    let k = d.dot(n).scale(2.0);
    d - n.mul_s(k)
}

/// Ray-plane intersection in splat-local Gaussian coordinates, before any
/// range or cutoff filtering. The branch on grazing rays is decided on
/// values so the tape path takes the same hits as the plain path.
#[derive(Clone, Copy, Debug)]
pub struct PlaneHit<T> {
    pub u: T,
    pub v: T,
    pub t: T,
    pub weight: T,
    pub point: Vec3<T>,
}

pub fn intersect_surfel<T: Real>(
    origin: Vec3<T>,
    dir: Vec3<T>,
    s: &Surfel<T>,
) -> Option<PlaneHit<T>> {
    let denom = dir.dot(s.t_w);
    if denom.value().abs() < GRAZE_EPS {
        return None;
    }
    let t = (s.center - origin).dot(s.t_w) / denom;
    let point = origin + dir.mul_s(t);
    let d = point - s.center;
    let u = d.dot(s.t_u) / s.scale[0];
    let v = d.dot(s.t_v) / s.scale[1];
    let weight = gaussian_weight(u, v);
    Some(PlaneHit {
        u,
        v,
        t,
        weight,
        point,
    })
}

/// One accepted ray-splat hit, in plain values. `weight` is exactly
/// `gaussian_weight(uv)` recomputed from the stored coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatHit {
    pub splat: usize,
    pub uv: [f64; 2],
    pub depth: f64,
    pub weight: f64,
    pub world_point: Vec3f,
}

/// Full hit test: plane intersection, ray range `(t_min, t_max)`, and the
/// Gaussian cutoff. `index` is recorded so hit lists can be re-sorted and
/// tie-broken deterministically.
pub fn intersect_ray_splat(
    ray: &Ray,
    s: &Surfel<f64>,
    cutoff: f64,
    index: usize,
) -> Option<SplatHit> {
    let hit = intersect_surfel(ray.origin, ray.dir, s)?;
    if !(hit.t > ray.t_min && hit.t < ray.t_max) {
        return None;
    }
    if hit.weight < cutoff {
        return None;
    }
    Some(SplatHit {
        splat: index,
        uv: [hit.u, hit.v],
        depth: hit.t,
        weight: hit.weight,
        world_point: hit.point,
    })
}

/// Affine map H from splat-local (u, v, 0, 1) to world, and its exact
/// inverse built from the orthonormal frame.
pub fn splat_affine(s: &Surfel<f64>) -> (Mat4, Mat4) {
    let c = s.center;
    let cu = s.t_u.scale(s.scale[0]);
    let cv = s.t_v.scale(s.scale[1]);
    let h = Mat4::from_columns(cu, cv, s.t_w, c);
    let ru = s.t_u.scale(1.0 / s.scale[0]);
    let rv = s.t_v.scale(1.0 / s.scale[1]);
    let rw = s.t_w;
    let h_inv = Mat4::from_rows([
        [ru.x, ru.y, ru.z, -c.dot(ru)],
        [rv.x, rv.y, rv.z, -c.dot(rv)],
        [rw.x, rw.y, rw.z, -c.dot(rw)],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    (h, h_inv)
}

/// Spherical-harmonic radiance in direction `dir` (must be unit), clamped
/// nonnegative per channel. `degree` may be at most the stored degree.
pub fn eval_sh<T: Real>(sh: &[[T; 3]], dir: Vec3<T>, degree: usize) -> Result<[T; 3]> {
    let need = sh_coeff_count(degree);
    if need > sh.len() {
        return Err(Error::Domain {
            op: "eval_sh",
            msg: format!(
                "degree {} needs {} coefficients, splat stores {}",
                degree,
                need,
                sh.len()
            ),
        });
    }
    let mut out = [
        sh[0][0].scale(SH_C0),
        sh[0][1].scale(SH_C0),
        sh[0][2].scale(SH_C0),
    ];
    if degree >= 1 {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        for ch in 0..3 {
            out[ch] = out[ch]
                + (y * sh[1][ch]).scale(-SH_C1)
                + (z * sh[2][ch]).scale(SH_C1)
                + (x * sh[3][ch]).scale(-SH_C1);
        }
    }
    if degree >= 2 {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        let xx = x * x;
        let yy = y * y;
        let zz = z * z;
        let basis = [
            (x * y).scale(SH_C2[0]),
            (y * z).scale(SH_C2[1]),
            (zz.scale(2.0) - xx - yy).scale(SH_C2[2]),
            (x * z).scale(SH_C2[3]),
            (xx - yy).scale(SH_C2[4]),
        ];
        for (b, coeff) in basis.iter().zip(&sh[4..9]) {
            for ch in 0..3 {
                out[ch] = out[ch] + *b * coeff[ch];
            }
        }
    }
    Ok([out[0].relu(), out[1].relu(), out[2].relu()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plain_surfel(center: [f64; 3], rotation: [f64; 4], scale: [f64; 2]) -> Surfel<f64> {
        RawSplat {
            center: Vec3::from_array(center),
            rotation: Quat::from_array(rotation),
            log_scale: [scale[0].ln(), scale[1].ln()],
            opacity_logit: 0.0,
            tint_logit: None,
            sh: vec![[1.0, 1.0, 1.0]],
        }
        .activate()
    }

    #[test]
    fn plane_point_scales_local_axes() {
        let s = plain_surfel([0.0; 3], [1.0, 0.0, 0.0, 0.0], [2.0, 1.0]);
        let p = plane_point(&s, 1.0, 0.0);
        assert!((p.x - 2.0).abs() < 1e-15 && p.y.abs() < 1e-15 && p.z.abs() < 1e-15);
        let p = plane_point(&s, 0.0, -3.0);
        assert!((p.y + 3.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_weight_is_one_at_center_and_decays() {
        assert_eq!(gaussian_weight(0.0, 0.0), 1.0);
        let w1 = gaussian_weight(1.0, 0.0);
        assert!((w1 - (-0.5f64).exp()).abs() < 1e-15);
        assert!(gaussian_weight(2.0, 2.0) < w1);
    }

    #[test]
    fn reflection_matches_hand_cases() {
        let n = Vec3::new(0.0, 0.0, 1.0);
        let d = Vec3::new(0.0, 0.0, -1.0);
        let r: Vec3f = reflect(d, n);
        assert_eq!(r, Vec3::new(0.0, 0.0, 1.0));
        // 45 degrees in the xz plane
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = Vec3::new(h, 0.0, -h);
        let r = reflect(d, n);
        assert!((r.x - h).abs() < 1e-15 && (r.z - h).abs() < 1e-15);
        // grazing: unchanged
        let d = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(reflect(d, n), d);
    }

    #[test]
    fn head_on_intersection_hits_center() {
        let s = plain_surfel([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [1.0, 1.0]);
        let ray = Ray::new(Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, -1.0));
        let hit = intersect_ray_splat(&ray, &s, default_cutoff(), 7).unwrap();
        assert_eq!(hit.splat, 7);
        assert!((hit.depth - 5.0).abs() < 1e-12);
        assert!(hit.uv[0].abs() < 1e-12 && hit.uv[1].abs() < 1e-12);
        assert!((hit.weight - 1.0).abs() < 1e-12);
        assert!((hit.world_point - Vec3::zero()).norm() < 1e-12);
    }

    #[test]
    fn parallel_rays_and_out_of_range_hits_are_rejected() {
        let s = plain_surfel([0.0; 3], [1.0, 0.0, 0.0, 0.0], [1.0, 1.0]);
        let parallel = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0));
        assert!(intersect_ray_splat(&parallel, &s, 0.0, 0).is_none());

        let behind = Ray::new(Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, -1.0));
        assert!(intersect_ray_splat(&behind, &s, 0.0, 0).is_none());

        let mut limited = Ray::new(Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, -1.0));
        limited.t_max = 4.0;
        assert!(intersect_ray_splat(&limited, &s, 0.0, 0).is_none());
        limited.t_max = 6.0;
        limited.t_min = 5.0; // exactly at the hit: excluded, range is open
        assert!(intersect_ray_splat(&limited, &s, 0.0, 0).is_none());
    }

    #[test]
    fn cutoff_discards_faint_hits() {
        let s = plain_surfel([0.0; 3], [1.0, 0.0, 0.0, 0.0], [1.0, 1.0]);
        // u = 4 => weight exp(-8) < exp(-4.5)
        let ray = Ray::new(Vec3::new(4.0, 0.0, 5.0), Vec3::new(0.0, 0.0, -1.0));
        assert!(intersect_ray_splat(&ray, &s, default_cutoff(), 0).is_none());
        assert!(intersect_ray_splat(&ray, &s, 0.0, 0).is_some());
    }

    #[test]
    fn stored_weight_recomputes_bit_exactly_from_uv() {
        let s = plain_surfel([0.3, -0.2, 1.0], [0.9, 0.1, -0.3, 0.2], [1.7, 0.6]);
        let ray = Ray::new(Vec3::new(0.5, 0.4, 5.0), Vec3::new(-0.05, -0.1, -1.0).normalized().unwrap());
        let hit = intersect_ray_splat(&ray, &s, 0.0, 0).unwrap();
        let re = gaussian_weight(hit.uv[0], hit.uv[1]);
        assert_eq!(re.to_bits(), hit.weight.to_bits());
    }

    #[test]
    fn activation_applies_floors_and_clamps() {
        let raw: RawSplat<f64> = RawSplat {
            center: Vec3::zero(),
            rotation: Quat::identity(),
            log_scale: [-100.0, 2.0],
            opacity_logit: 1000.0,
            tint_logit: Some(-1000.0),
            sh: vec![[0.0; 3]],
        };
        let s = raw.activate();
        assert_eq!(s.scale[0], SCALE_FLOOR);
        assert!((s.scale[1] - 2.0f64.exp()).abs() < 1e-12);
        let sig30 = 1.0 / (1.0 + (-30.0f64).exp());
        let sig_neg30 = (-30.0f64).exp() / (1.0 + (-30.0f64).exp());
        assert_eq!(s.alpha, sig30);
        assert_eq!(s.tint, sig_neg30);
        assert!(s.alpha < 1.0 && s.tint > 0.0);
    }

    #[test]
    fn degenerate_rotation_falls_back_to_identity_frame() {
        let raw: RawSplat<f64> = RawSplat {
            center: Vec3::zero(),
            rotation: Quat::new(0.0, 0.0, 0.0, 0.0),
            log_scale: [0.0, 0.0],
            opacity_logit: 0.0,
            tint_logit: None,
            sh: vec![[0.0; 3]],
        };
        let s = raw.activate();
        assert_eq!(s.t_w.value(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn sh_degree_zero_reproduces_flat_color() {
        let c0 = 1.0 / SH_C0;
        let sh = vec![[c0, 0.5 * c0, 0.0]];
        for dir in [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(0.6, -0.64, 0.48),
        ] {
            let c = eval_sh(&sh, dir, 0).unwrap();
            assert!((c[0] - 1.0).abs() < 1e-12);
            assert!((c[1] - 0.5).abs() < 1e-12);
            assert_eq!(c[2], 0.0);
        }
    }

    #[test]
    fn sh_y10_term_is_linear_in_z() {
        let mut sh = vec![[0.0; 3]; 4];
        sh[0] = [2.0 / SH_C0, 2.0 / SH_C0, 2.0 / SH_C0]; // lift so clamp stays inactive
        sh[2] = [1.0, 1.0, 1.0];
        let at = |z: f64| {
            let x = (1.0 - z * z).sqrt();
            eval_sh(&sh, Vec3::new(x, 0.0, z), 1).unwrap()[0]
        };
        let (a, b, c) = (at(-0.8), at(0.0), at(0.8));
        assert!((b - (a + c) / 2.0).abs() < 1e-12, "linear in z");
        assert!((c - b - (SH_C1 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn sh_clamps_negative_radiance_to_zero() {
        let sh = vec![[-5.0, 0.1, -0.0]];
        let c = eval_sh(&sh, Vec3::new(0.0, 0.0, 1.0), 0).unwrap();
        assert_eq!(c[0], 0.0);
        assert!(c[1] > 0.0);
    }

    #[test]
    fn sh_degree_above_stored_is_an_error() {
        let sh = vec![[1.0f64, 1.0, 1.0]; 4];
        assert!(eval_sh(&sh, Vec3::new(0.0, 0.0, 1.0), 1).is_ok());
        assert!(eval_sh(&sh, Vec3::new(0.0, 0.0, 1.0), 2).is_err());
    }

    /// Independent basis table straight from the real spherical harmonics
    /// (graphics sign convention), evaluated coefficient by coefficient.
    fn sh_oracle(sh: &[[f64; 3]], dir: [f64; 3], degree: usize) -> [f64; 3] {
        let pi = std::f64::consts::PI;
        let (x, y, z) = (dir[0], dir[1], dir[2]);
        let mut basis = vec![0.5 * (1.0 / pi).sqrt()];
        if degree >= 1 {
            let k = (3.0 / (4.0 * pi)).sqrt();
            basis.extend([-k * y, k * z, -k * x]);
        }
        if degree >= 2 {
            let k1 = 0.5 * (15.0 / pi).sqrt();
            let k2 = 0.25 * (5.0 / pi).sqrt();
            let k3 = 0.25 * (15.0 / pi).sqrt();
            basis.extend([
                k1 * x * y,
                -k1 * y * z,
                k2 * (2.0 * z * z - x * x - y * y),
                -k1 * x * z,
                k3 * (x * x - y * y),
            ]);
        }
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = basis
                .iter()
                .enumerate()
                .map(|(i, b)| b * sh[i][ch])
                .sum::<f64>()
                .max(0.0);
        }
        out
    }

    proptest! {
        #[test]
        fn eval_sh_matches_textbook_basis(
            seed in 0u64..1000,
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let dir = Vec3::new(dx, dy, dz);
            prop_assume!(dir.norm() > 1e-3);
            let dir = dir.normalized().unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sh: Vec<[f64; 3]> = (0..9)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            for degree in 0..=2 {
                let ours = eval_sh(&sh, dir, degree).unwrap();
                let reference = sh_oracle(&sh, [dir.x, dir.y, dir.z], degree);
                for ch in 0..3 {
                    prop_assert!((ours[ch] - reference[ch]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn reflect_preserves_length_and_is_an_involution(
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0,
            nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in -1.0f64..1.0,
        ) {
            let d = Vec3::new(dx, dy, dz);
            let n = Vec3::new(nx, ny, nz);
            prop_assume!(d.norm() > 1e-3 && n.norm() > 1e-3);
            let n = n.normalized().unwrap();
            let r = reflect(d, n);
            prop_assert!((r.norm() - d.norm()).abs() < 1e-12);
            let rr = reflect(r, n);
            prop_assert!((rr - d).norm() < 1e-12);
            // reflected component flips, tangential stays
            prop_assert!((r.dot(n) + d.dot(n)).abs() < 1e-12);
        }

        #[test]
        fn splat_affine_inverts_plane_points(
            u in -3.0f64..3.0, v in -3.0f64..3.0,
            qw in -1.0f64..1.0, qx in -1.0f64..1.0, qy in -1.0f64..1.0, qz in -1.0f64..1.0,
            cx in -5.0f64..5.0, cy in -5.0f64..5.0, cz in -5.0f64..5.0,
            s0 in 0.05f64..4.0, s1 in 0.05f64..4.0,
        ) {
            let q = Quat::new(qw, qx, qy, qz);
            prop_assume!(q.norm() > 1e-3);
            let s = plain_surfel([cx, cy, cz], [qw, qx, qy, qz], [s0, s1]);
            let (h, h_inv) = splat_affine(&s);
            prop_assert!(h.mul(&h_inv).max_abs_diff(&Mat4::identity()) < 1e-9);
            prop_assert!(h_inv.mul(&h).max_abs_diff(&Mat4::identity()) < 1e-9);
            let world = plane_point(&s, u, v);
            let local = h_inv.apply_point(world);
            prop_assert!((local.x - u).abs() < 1e-9);
            prop_assert!((local.y - v).abs() < 1e-9);
            prop_assert!(local.z.abs() < 1e-9);
            let forward = h.apply_point(Vec3::new(u, v, 0.0));
            prop_assert!((forward - world).norm() < 1e-9);
        }

        #[test]
        fn intersection_point_lies_on_plane_and_matches_uv(
            ox in -4.0f64..4.0, oy in -4.0f64..4.0,
            qw in -1.0f64..1.0, qx in -1.0f64..1.0, qy in -1.0f64..1.0, qz in -1.0f64..1.0,
        ) {
            let q = Quat::new(qw, qx, qy, qz);
            prop_assume!(q.norm() > 0.1);
            let s = plain_surfel([0.0, 0.0, 0.0], [qw, qx, qy, qz], [1.3, 0.8]);
            let ray = Ray::new(Vec3::new(ox, oy, 10.0), Vec3::new(0.0, 0.0, -1.0));
            if let Some(hit) = intersect_ray_splat(&ray, &s, 0.0, 0) {
                let p = plane_point(&s, hit.uv[0], hit.uv[1]);
                prop_assert!((p - hit.world_point).norm() < 1e-9);
                prop_assert!((hit.world_point - s.center).dot(s.t_w).abs() < 1e-9);
            }
        }
    }
}
