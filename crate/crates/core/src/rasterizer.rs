//! Front-to-back surfel compositing into per-pixel buffers, with tile
//! culling on the value path, depth-derived pseudo normals, and a naive
//! reference renderer the production path is tested against.

use crate::autodiff::Real;
use crate::math::{Vec3, Vec3f};
use crate::scene::Camera;
use crate::splat_math::{cutoff_radius, default_cutoff, eval_sh, intersect_surfel, PlaneHit, Surfel};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct RenderSettings {
    /// Minimum Gaussian weight a hit must reach. Must lie in (0, 1]; the
    /// culling radius in local units is sqrt(-2 ln cutoff).
    pub gaussian_cutoff: f64,
    /// Compositing stops once transmittance drops below this. 0 disables,
    /// which the oracle-equivalence suites rely on.
    pub early_stop: f64,
    /// Pixels whose accumulated alpha exceeds this carry a unit normal;
    /// everywhere else the normal buffer is zero.
    pub alpha_mask_threshold: f64,
    pub background: [f64; 3],
    pub tile_size: usize,
    /// Flip each splat normal toward the camera before blending.
    pub flip_normals: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            gaussian_cutoff: default_cutoff(),
            early_stop: 1e-4,
            alpha_mask_threshold: 0.5,
            background: [0.0; 3],
            tile_size: 16,
            flip_normals: true,
        }
    }
}

/// Everything one render pass produces, per pixel, row-major from the top
/// left. `alpha` is the accumulated blend weight (1 - final transmittance
/// up to rounding), and the mask the losses cut on.
#[derive(Clone, Debug)]
pub struct Buffers<T> {
    pub width: usize,
    pub height: usize,
    pub diffuse: Vec<[T; 3]>,
    pub depth: Vec<T>,
    pub normal: Vec<Vec3<T>>,
    pub alpha_spec: Vec<T>,
    pub transmittance: Vec<T>,
    pub alpha: Vec<T>,
}

pub type RenderBuffers = Buffers<f64>;

impl<T: Real> Buffers<T> {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Buffers {
            width,
            height,
            diffuse: vec![[T::lit(0.0); 3]; n],
            depth: vec![T::lit(0.0); n],
            normal: vec![Vec3::zero(); n],
            alpha_spec: vec![T::lit(0.0); n],
            transmittance: vec![T::lit(1.0); n],
            alpha: vec![T::lit(0.0); n],
        }
    }

    fn put(&mut self, idx: usize, s: PixelSample<T>) {
        self.diffuse[idx] = s.diffuse;
        self.depth[idx] = s.depth;
        self.normal[idx] = s.normal;
        self.alpha_spec[idx] = s.alpha_spec;
        self.transmittance[idx] = s.transmittance;
        self.alpha[idx] = s.alpha;
    }

    /// Plain-value snapshot, used for masking decisions and file export.
    pub fn values(&self) -> RenderBuffers {
        RenderBuffers {
            width: self.width,
            height: self.height,
            diffuse: self
                .diffuse
                .iter()
                .map(|c| [c[0].value(), c[1].value(), c[2].value()])
                .collect(),
            depth: self.depth.iter().map(|d| d.value()).collect(),
            normal: self.normal.iter().map(|n| n.value()).collect(),
            alpha_spec: self.alpha_spec.iter().map(|a| a.value()).collect(),
            transmittance: self.transmittance.iter().map(|t| t.value()).collect(),
            alpha: self.alpha.iter().map(|a| a.value()).collect(),
        }
    }
}

impl RenderBuffers {
    pub fn diffuse_image(&self) -> crate::image::ImageRgb {
        crate::image::ImageRgb {
            width: self.width,
            height: self.height,
            data: self.diffuse.clone(),
        }
    }

    pub fn depth_image(&self) -> crate::image::ImageGray {
        crate::image::ImageGray {
            width: self.width,
            height: self.height,
            data: self.depth.clone(),
        }
    }

    pub fn normal_image(&self) -> crate::image::ImageRgb {
        crate::image::ImageRgb {
            width: self.width,
            height: self.height,
            data: self.normal.iter().map(|n| [n.x, n.y, n.z]).collect(),
        }
    }

    pub fn alpha_spec_image(&self) -> crate::image::ImageGray {
        crate::image::ImageGray {
            width: self.width,
            height: self.height,
            data: self.alpha_spec.clone(),
        }
    }
}

pub struct PixelSample<T> {
    pub diffuse: [T; 3],
    pub depth: T,
    pub normal: Vec3<T>,
    pub alpha_spec: T,
    pub transmittance: T,
    pub alpha: T,
}

fn check_inputs(camera: &Camera, settings: &RenderSettings) -> Result<()> {
    if camera.width == 0 || camera.height == 0 {
        return Err(Error::Dimension {
            msg: format!(
                "camera resolution {}x{} has no pixels",
                camera.width, camera.height
            ),
        });
    }
    if !(settings.gaussian_cutoff > 0.0 && settings.gaussian_cutoff <= 1.0) {
        return Err(Error::Config(format!(
            "gaussian cutoff {} outside (0, 1]",
            settings.gaussian_cutoff
        )));
    }
    if settings.tile_size == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    Ok(())
}

/// Per-tile candidate lists. A splat lands in every tile its projected
/// cutoff-radius bounding box can touch, with a one pixel safety margin;
/// any box corner at or behind the camera makes the splat a candidate
/// everywhere. Candidates stay sorted by splat index because the build
/// loop visits splats in order.
struct TileGrid {
    tiles_x: usize,
    size: usize,
    lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn candidates(&self, px: usize, py: usize) -> &[u32] {
        &self.lists[(py / self.size) * self.tiles_x + (px / self.size)]
    }
}

fn build_tile_grid(vals: &[Surfel<f64>], camera: &Camera, settings: &RenderSettings) -> TileGrid {
    let size = settings.tile_size;
    let tiles_x = camera.width.div_ceil(size);
    let tiles_y = camera.height.div_ceil(size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let r_cut = cutoff_radius(settings.gaussian_cutoff);
    for (i, s) in vals.iter().enumerate() {
        let c = [s.center.x, s.center.y, s.center.z];
        let tu = [s.t_u.x, s.t_u.y, s.t_u.z];
        let tv = [s.t_v.x, s.t_v.y, s.t_v.z];
        let mut ext = [0.0; 3];
        for a in 0..3 {
            ext[a] = r_cut * (s.scale[0] * tu[a]).hypot(s.scale[1] * tv[a]);
        }
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut everywhere = false;
        for corner in 0..8 {
            let p = Vec3::new(
                c[0] + if corner & 1 == 0 { -ext[0] } else { ext[0] },
                c[1] + if corner & 2 == 0 { -ext[1] } else { ext[1] },
                c[2] + if corner & 4 == 0 { -ext[2] } else { ext[2] },
            );
            match camera.project(p) {
                Some((x, y, _)) => {
                    lo = (lo.0.min(x), lo.1.min(y));
                    hi = (hi.0.max(x), hi.1.max(y));
                }
                None => {
                    everywhere = true;
                    break;
                }
            }
        }
        let (x0, x1, y0, y1) = if everywhere {
            (0, camera.width - 1, 0, camera.height - 1)
        } else {
            let clamp_px = |v: f64, max: usize| (v.max(0.0) as usize).min(max - 1);
            let x0 = clamp_px(lo.0.floor() - 1.0, camera.width);
            let x1 = clamp_px(hi.0.ceil() + 1.0, camera.width);
            let y0 = clamp_px(lo.1.floor() - 1.0, camera.height);
            let y1 = clamp_px(hi.1.ceil() + 1.0, camera.height);
            if hi.0 < -1.0 || lo.0 > camera.width as f64 + 1.0 || hi.1 < -1.0 || lo.1 > camera.height as f64 + 1.0 {
                continue;
            }
            (x0, x1, y0, y1)
        };
        for ty in y0 / size..=y1 / size {
            for tx in x0 / size..=x1 / size {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    TileGrid {
        tiles_x,
        size,
        lists,
    }
}

/// Composites depth-sorted hits for one pixel. Per hit i the blend weight
/// is alpha_i = base alpha * Gaussian weight, attenuated by the running
/// transmittance; the loop stops once transmittance falls under the early
/// stop. Background lands in the diffuse channel only. Branches (early
/// stop, normal flip, depth guard, mask) all cut on plain values so the
/// recorded and value paths stay bit-identical.
pub fn composite_pixel<T: Real>(
    splats: &[Surfel<T>],
    hits: &[(f64, u32, PlaneHit<T>)],
    view_dir: Vec3f,
    settings: &RenderSettings,
) -> PixelSample<T> {
    let zero = T::lit(0.0);
    let one = T::lit(1.0);
    let mut trans = one;
    let mut diffuse = [zero; 3];
    let mut alpha_spec = zero;
    let mut alpha_acc = zero;
    let mut depth_sum = zero;
    let mut normal_sum: Vec3<T> = Vec3::zero();
    let dir = Vec3::from_f64(view_dir);
    for (_, i, hit) in hits {
        if trans.value() < settings.early_stop {
            break;
        }
        let s = &splats[*i as usize];
        let a = s.alpha * hit.weight;
        let w = a * trans;
        let c = eval_sh(&s.sh, dir, s.sh_degree()).expect("degree from stored coefficients");
        for ch in 0..3 {
            diffuse[ch] = diffuse[ch] + c[ch] * w;
        }
        alpha_spec = alpha_spec + s.tint * w;
        alpha_acc = alpha_acc + w;
        depth_sum = depth_sum + hit.t * w;
        let n = if settings.flip_normals && s.t_w.value().dot(view_dir) > 0.0 {
            -s.t_w
        } else {
            s.t_w
        };
        normal_sum = normal_sum + n.mul_s(w);
        trans = trans * (one - a);
    }
    let depth = if alpha_acc.value() <= 1e-12 {
        zero
    } else {
        depth_sum / alpha_acc
    };
    let normal = if alpha_acc.value() > settings.alpha_mask_threshold {
        normal_sum.normalized().unwrap_or_else(Vec3::zero)
    } else {
        Vec3::zero()
    };
    for ch in 0..3 {
        diffuse[ch] = diffuse[ch] + trans * T::lit(settings.background[ch]);
    }
    PixelSample {
        diffuse,
        depth,
        normal,
        alpha_spec,
        transmittance: trans,
        alpha: alpha_acc,
    }
}

/// Shades one pixel: hit-tests the candidates on values first (cheap, and
/// keeps rejected splats off the tape), re-derives accepted hits in T, and
/// composites in (depth, index) order.
fn shade_pixel<T: Real>(
    splats: &[Surfel<T>],
    vals: &[Surfel<f64>],
    candidates: &[u32],
    camera: &Camera,
    px: usize,
    py: usize,
    settings: &RenderSettings,
) -> PixelSample<T> {
    let ray = camera.ray_through(px as f64 + 0.5, py as f64 + 0.5);
    let mut hits: Vec<(f64, u32, PlaneHit<T>)> = Vec::new();
    for &i in candidates {
        let Some(h) = intersect_surfel(ray.origin, ray.dir, &vals[i as usize]) else {
            continue;
        };
        if !(h.t > ray.t_min && h.t < ray.t_max) || h.weight < settings.gaussian_cutoff {
            continue;
        }
        let hit = if T::TRACKS_GRADIENTS {
            intersect_surfel(
                Vec3::from_f64(ray.origin),
                Vec3::from_f64(ray.dir),
                &splats[i as usize],
            )
            .expect("value path accepted this hit")
        } else {
            PlaneHit {
                u: T::lit(h.u),
                v: T::lit(h.v),
                t: T::lit(h.t),
                weight: T::lit(h.weight),
                point: Vec3::from_f64(h.point),
            }
        };
        hits.push((h.t, i, hit));
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    composite_pixel(splats, &hits, ray.dir, settings)
}

/// Renders all buffers for one camera. Sequential over pixels; the value
/// path has a tile-parallel twin in [`render_parallel`] that computes the
/// exact same per-pixel samples.
pub fn render<T: Real>(
    splats: &[Surfel<T>],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Buffers<T>> {
    check_inputs(camera, settings)?;
    let vals: Vec<Surfel<f64>> = splats.iter().map(|s| s.values()).collect();
    let grid = build_tile_grid(&vals, camera, settings);
    let mut buf = Buffers::new(camera.width, camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let s = shade_pixel(splats, &vals, grid.candidates(px, py), camera, px, py, settings);
            buf.put(py * camera.width + px, s);
        }
    }
    Ok(buf)
}

/// Value-path renderer parallelized over rows. Pixels are independent, so
/// this is bit-identical to [`render`] at any worker count.
pub fn render_parallel(
    splats: &[Surfel<f64>],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderBuffers> {
    check_inputs(camera, settings)?;
    let grid = build_tile_grid(splats, camera, settings);
    let rows = crate::parallel::map_indexed(camera.height, |py| {
        (0..camera.width)
            .map(|px| shade_pixel(splats, splats, grid.candidates(px, py), camera, px, py, settings))
            .collect::<Vec<_>>()
    });
    let mut buf = Buffers::new(camera.width, camera.height);
    for (py, row) in rows.into_iter().enumerate() {
        for (px, s) in row.into_iter().enumerate() {
            buf.put(py * camera.width + px, s);
        }
    }
    Ok(buf)
}

/// Reference renderer: tests every splat at every pixel with its own plane
/// math, sorts fully, expands each transmittance factor as a literal
/// product over earlier hits, and never stops early. Deliberately naive;
/// the production renderer is validated against it.
pub fn oracle_render(
    splats: &[Surfel<f64>],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderBuffers> {
    check_inputs(camera, settings)?;
    let mut buf = Buffers::new(camera.width, camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let ray = camera.ray_through(px as f64 + 0.5, py as f64 + 0.5);
            let mut hits: Vec<(f64, usize, f64)> = Vec::new();
            for (i, s) in splats.iter().enumerate() {
                let denom = ray.dir.dot(s.t_w);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = (s.center - ray.origin).dot(s.t_w) / denom;
                if !(t > ray.t_min && t < ray.t_max) {
                    continue;
                }
                let p = ray.origin + ray.dir.scale(t);
                let u = (p - s.center).dot(s.t_u) / s.scale[0];
                let v = (p - s.center).dot(s.t_v) / s.scale[1];
                let weight = (-(u * u + v * v) / 2.0).exp();
                if weight < settings.gaussian_cutoff {
                    continue;
                }
                hits.push((t, i, weight));
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut diffuse = [0.0; 3];
            let mut alpha_spec = 0.0;
            let mut alpha_acc = 0.0;
            let mut depth_sum = 0.0;
            let mut normal_sum = Vec3::new(0.0, 0.0, 0.0);
            let mut t_final = 1.0;
            for (k, &(t, i, weight)) in hits.iter().enumerate() {
                let mut trans = 1.0;
                for &(_, j, wj) in &hits[..k] {
                    trans *= 1.0 - splats[j].alpha * wj;
                }
                let s = &splats[i];
                let a = s.alpha * weight;
                let w = a * trans;
                let c = eval_sh(&s.sh, ray.dir, s.sh_degree()).expect("stored degree");
                for ch in 0..3 {
                    diffuse[ch] += c[ch] * w;
                }
                alpha_spec += s.tint * w;
                alpha_acc += w;
                depth_sum += t * w;
                let n = if settings.flip_normals && s.t_w.dot(ray.dir) > 0.0 {
                    -s.t_w
                } else {
                    s.t_w
                };
                normal_sum = normal_sum + n.scale(w);
                t_final = trans * (1.0 - a);
            }
            if hits.is_empty() {
                t_final = 1.0;
            }
            let depth = if alpha_acc <= 1e-12 {
                0.0
            } else {
                depth_sum / alpha_acc
            };
            let normal = if alpha_acc > settings.alpha_mask_threshold {
                normal_sum.normalized().unwrap_or_else(Vec3::zero)
            } else {
                Vec3::zero()
            };
            for ch in 0..3 {
                diffuse[ch] += t_final * settings.background[ch];
            }
            buf.put(
                py * camera.width + px,
                PixelSample {
                    diffuse,
                    depth,
                    normal,
                    alpha_spec,
                    transmittance: t_final,
                    alpha: alpha_acc,
                },
            );
        }
    }
    Ok(buf)
}

/// Depth-derived normals and their validity mask, row-major.
pub struct PseudoNormals<T> {
    pub dirs: Vec<Vec3<T>>,
    pub valid: Vec<bool>,
}

/// Pseudo normals from a depth buffer: back-project every pixel along its
/// ray, take spatial gradients (central differences, one-sided at the
/// borders), and cross them. Pixels whose cross product has value norm
/// under 1e-9 are masked out, as is everything when either dimension is
/// too small to difference.
pub fn pseudo_normals_from_depth<T: Real>(
    depth: &[T],
    camera: &Camera,
) -> Result<PseudoNormals<T>> {
    let (w, h) = (camera.width, camera.height);
    if depth.len() != w * h {
        return Err(Error::Dimension {
            msg: format!(
                "depth buffer holds {} values for a {}x{} camera",
                depth.len(),
                w,
                h
            ),
        });
    }
    let mut out = PseudoNormals {
        dirs: vec![Vec3::zero(); w * h],
        valid: vec![false; w * h],
    };
    if w < 2 || h < 2 {
        return Ok(out);
    }
    let rays: Vec<crate::splat_math::Ray> = (0..w * h)
        .map(|i| camera.ray_through((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
        .collect();
    let points: Vec<Vec3<T>> = (0..w * h)
        .map(|i| Vec3::from_f64(rays[i].origin) + Vec3::from_f64(rays[i].dir).mul_s(depth[i]))
        .collect();
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            let gx = match px {
                0 => points[i + 1] - points[i],
                _ if px == w - 1 => points[i] - points[i - 1],
                _ => points[i + 1] - points[i - 1],
            };
            let gy = match py {
                0 => points[i + w] - points[i],
                _ if py == h - 1 => points[i] - points[i - w],
                _ => points[i + w] - points[i - w],
            };
            let n = gx.cross(gy);
            if n.value().norm() < 1e-9 {
                continue;
            }
            let mut unit = n.normalized().expect("norm checked above");
            if unit.value().dot(rays[i].dir) > 0.0 {
                unit = -unit;
            }
            out.dirs[i] = unit;
            out.valid[i] = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape, Var};
    use crate::math::Mat4;
    use crate::scene::logit;
    use crate::splat_math::{RawSplat, SH_C0};
    use crate::synth::{random_camera, sample_main_splats};
    use crate::math::Quat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_on_camera(width: usize, height: usize) -> Camera {
        Camera {
            fx: 20.0,
            fy: 20.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: Mat4::identity(),
            time: 0.0,
        }
    }

    fn flat_splat(center: [f64; 3], color: [f64; 3], opacity_logit: f64) -> Surfel<f64> {
        RawSplat {
            center: Vec3::from_array(center),
            rotation: Quat::identity(),
            log_scale: [2.0, 2.0],
            opacity_logit,
            tint_logit: Some(0.0),
            sh: vec![[color[0] / SH_C0, color[1] / SH_C0, color[2] / SH_C0]],
        }
        .activate()
    }

    fn test_surfels(seed: u64, n: usize) -> Vec<Surfel<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_main_splats(&mut rng, n, 1.0)
            .iter()
            .map(|p| p.to_raw::<f64>().activate())
            .collect()
    }

    fn max_buffer_diff(a: &RenderBuffers, b: &RenderBuffers) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..a.depth.len() {
            for ch in 0..3 {
                m = m.max((a.diffuse[i][ch] - b.diffuse[i][ch]).abs());
            }
            m = m.max((a.depth[i] - b.depth[i]).abs());
            m = m.max((a.normal[i] - b.normal[i]).norm());
            m = m.max((a.alpha_spec[i] - b.alpha_spec[i]).abs());
            m = m.max((a.transmittance[i] - b.transmittance[i]).abs());
            m = m.max((a.alpha[i] - b.alpha[i]).abs());
        }
        m
    }

    #[test]
    fn empty_scene_is_background_and_full_transmittance() {
        let camera = head_on_camera(4, 3);
        let settings = RenderSettings {
            background: [0.2, 0.4, 0.6],
            ..RenderSettings::default()
        };
        let buf = render::<f64>(&[], &camera, &settings).unwrap();
        for i in 0..12 {
            assert_eq!(buf.diffuse[i], [0.2, 0.4, 0.6]);
            assert_eq!(buf.transmittance[i], 1.0);
            assert_eq!(buf.alpha[i], 0.0);
            assert_eq!(buf.depth[i], 0.0);
            assert_eq!(buf.normal[i], Vec3::zero());
        }
    }

    #[test]
    fn zero_resolution_camera_is_an_error() {
        let camera = head_on_camera(0, 4);
        assert!(render::<f64>(&[], &camera, &RenderSettings::default()).is_err());
    }

    #[test]
    fn near_opaque_head_on_splat_dominates_the_pixel() {
        let camera = head_on_camera(5, 5);
        let splats = [flat_splat([0.0, 0.0, 5.0], [0.3, 0.6, 0.9], 30.0)];
        let buf = render(&splats, &camera, &RenderSettings::default()).unwrap();
        let i = 2 * 5 + 2;
        for ch in 0..3 {
            assert!((buf.diffuse[i][ch] - [0.3, 0.6, 0.9][ch]).abs() < 1e-9);
        }
        assert!((buf.depth[i] - 5.0).abs() < 1e-9);
        assert!((buf.alpha[i] - 1.0).abs() < 1e-9);
        // Camera looks along +z and the surfel normal is +z, so it flips.
        assert!((buf.normal[i] - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let unflipped = RenderSettings {
            flip_normals: false,
            ..RenderSettings::default()
        };
        let buf2 = render(&splats, &camera, &unflipped).unwrap();
        assert!((buf2.normal[i] - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn two_half_alpha_hits_blend_in_closed_form() {
        let camera = head_on_camera(3, 3);
        let s1 = flat_splat([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], logit(0.5));
        let s2 = flat_splat([0.0, 0.0, 2.0], [0.0, 1.0, 0.0], logit(0.5));
        let buf = render(&[s1, s2], &camera, &RenderSettings::default()).unwrap();
        let i = 1 * 3 + 1;
        assert!((buf.diffuse[i][0] - 0.5).abs() < 1e-12);
        assert!((buf.diffuse[i][1] - 0.25).abs() < 1e-12);
        assert_eq!(buf.transmittance[i], 0.25);
        assert_eq!(buf.alpha[i], 0.75);
        // Both tints are exactly one half.
        assert!((buf.alpha_spec[i] - 0.375).abs() < 1e-15);
        assert!((buf.depth[i] - (0.5 * 1.0 + 0.25 * 2.0) / 0.75).abs() < 1e-12);
    }

    #[test]
    fn shuffling_the_splat_list_changes_nothing() {
        let camera = random_camera(&mut ChaCha8Rng::seed_from_u64(1), Vec3::zero(), 4.0, 24, 24);
        let splats = test_surfels(2, 30);
        let mut shuffled = splats.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let settings = RenderSettings::default();
        let a = render(&splats, &camera, &settings).unwrap();
        let b = render(&shuffled, &camera, &settings).unwrap();
        assert_eq!(max_buffer_diff(&a, &b), 0.0);
    }

    #[test]
    fn tiled_render_matches_oracle() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let camera = random_camera(&mut rng, Vec3::zero(), 4.0, 24, 24);
            let splats = test_surfels(seed + 100, 40);
            let settings = RenderSettings {
                early_stop: 0.0,
                tile_size: 8,
                background: [0.1, 0.1, 0.2],
                ..RenderSettings::default()
            };
            let fast = render(&splats, &camera, &settings).unwrap();
            let slow = oracle_render(&splats, &camera, &settings).unwrap();
            let d = max_buffer_diff(&fast, &slow);
            assert!(d < 1e-6, "seed {} diverged by {}", seed, d);
            for i in 0..fast.alpha.len() {
                assert!(fast.alpha_spec[i] <= fast.alpha[i] + 1e-12);
                assert!((0.0..=1.0).contains(&fast.transmittance[i]));
            }
        }
    }

    #[test]
    fn tile_size_does_not_change_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let camera = random_camera(&mut rng, Vec3::zero(), 3.5, 17, 23);
        let splats = test_surfels(9, 25);
        let a = render(
            &splats,
            &camera,
            &RenderSettings {
                tile_size: 1000,
                ..RenderSettings::default()
            },
        )
        .unwrap();
        let b = render(
            &splats,
            &camera,
            &RenderSettings {
                tile_size: 5,
                ..RenderSettings::default()
            },
        )
        .unwrap();
        assert_eq!(max_buffer_diff(&a, &b), 0.0);
    }

    #[test]
    fn splat_behind_camera_is_culled_conservatively() {
        let camera = head_on_camera(8, 8);
        // One splat behind the camera, one huge one straddling the
        // camera plane (forcing the cover-everything path), one visible.
        let splats = vec![
            flat_splat([0.0, 0.0, -4.0], [1.0, 0.0, 0.0], 2.0),
            flat_splat([0.0, 8.0, 0.5], [0.0, 1.0, 0.0], 2.0),
            flat_splat([0.0, 0.0, 3.0], [0.0, 0.0, 1.0], 2.0),
        ];
        let settings = RenderSettings {
            early_stop: 0.0,
            tile_size: 4,
            ..RenderSettings::default()
        };
        let fast = render(&splats, &camera, &settings).unwrap();
        let slow = oracle_render(&splats, &camera, &settings).unwrap();
        assert_eq!(max_buffer_diff(&fast, &slow), 0.0);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_rows_match_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let camera = random_camera(&mut rng, Vec3::zero(), 4.0, 20, 20);
        let splats = test_surfels(4, 30);
        let settings = RenderSettings::default();
        let a = render(&splats, &camera, &settings).unwrap();
        let b = render_parallel(&splats, &camera, &settings).unwrap();
        assert_eq!(max_buffer_diff(&a, &b), 0.0);
    }

    #[test]
    fn pseudo_normals_of_a_fronto_parallel_plane_face_the_camera() {
        let camera = head_on_camera(9, 9);
        // Depth along each pixel ray to the plane z = 4.
        let depth: Vec<f64> = (0..81)
            .map(|i| {
                let ray = camera.ray_through((i % 9) as f64 + 0.5, (i / 9) as f64 + 0.5);
                4.0 / ray.dir.z
            })
            .collect();
        let pn = pseudo_normals_from_depth(&depth, &camera).unwrap();
        for i in 0..81 {
            assert!(pn.valid[i]);
            assert!((pn.dirs[i] - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn pseudo_normals_of_a_tilted_plane_recover_its_tilt() {
        let camera = head_on_camera(16, 16);
        // Plane y + z = 6, tilted 45 degrees toward the camera.
        let depth: Vec<f64> = (0..256)
            .map(|i| {
                let ray = camera.ray_through((i % 16) as f64 + 0.5, (i / 16) as f64 + 0.5);
                6.0 / (ray.dir.y + ray.dir.z)
            })
            .collect();
        let pn = pseudo_normals_from_depth(&depth, &camera).unwrap();
        let want = Vec3::new(0.0, -1.0, -1.0).normalized().unwrap();
        for py in 1..15 {
            for px in 1..15 {
                let i = py * 16 + px;
                assert!(pn.valid[i]);
                assert!((pn.dirs[i] - want).norm() < 1e-3);
            }
        }
    }

    #[test]
    fn tiny_images_mask_all_pseudo_normals() {
        let camera = head_on_camera(1, 1);
        let pn = pseudo_normals_from_depth(&[3.0], &camera).unwrap();
        assert!(!pn.valid[0]);
        let wide = head_on_camera(4, 1);
        let pn = pseudo_normals_from_depth(&[1.0, 1.0, 1.0, 1.0], &wide).unwrap();
        assert!(pn.valid.iter().all(|v| !v));
    }

    // Scalar probe over the rendered buffers of two overlapping splats,
    // touching center, rotation, scale, opacity, tint, and color.
    fn buffer_probe<'t>(p: &[Var<'t>], camera: &Camera, settings: &RenderSettings) -> Var<'t> {
        let mk = |off: usize, z: f64| -> Surfel<Var<'t>> {
            RawSplat {
                center: Vec3::new(p[off], p[off + 1], p[off + 2].scale(0.0).shift(z)),
                rotation: Quat::new(
                    p[off + 2].scale(0.0).shift(1.0),
                    p[off + 2].scale(0.05),
                    p[off + 2].scale(0.0),
                    p[off + 2].scale(0.0),
                ),
                log_scale: [p[off + 3], p[off + 3]],
                opacity_logit: p[off + 4],
                tint_logit: Some(p[off + 5]),
                sh: vec![[p[off + 6], p[off + 6], p[off + 6]]],
            }
            .activate()
        };
        let splats = vec![mk(0, 3.0), mk(7, 4.0)];
        let buf = render(&splats, camera, settings).unwrap();
        let mut acc = buf.diffuse[5][0];
        acc = acc + buf.depth[5] + buf.alpha_spec[5] + buf.normal[5].x;
        acc = acc + buf.diffuse[10][1] + buf.transmittance[10];
        acc
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let camera = head_on_camera(4, 4);
        let settings = RenderSettings::default();
        let x0 = [
            0.05, -0.02, 0.0, 0.3, 0.4, -0.2, 1.1, -0.04, 0.06, 0.0, 0.5, 0.9, 0.3, 0.8,
        ];
        let report = grad_check(|p| buffer_probe(p, &camera, &settings), &x0);
        assert!(
            report.passes(1e-6),
            "max rel err {} at parameter {}",
            report.max_rel_err,
            report.worst_param
        );
        // Shallow sanity check that the probe actually saw the splats.
        let tape = Tape::new();
        let vars: Vec<Var> = x0.iter().map(|&v| tape.var(v)).collect();
        assert!(buffer_probe(&vars, &camera, &settings).value() > 0.0);
    }
}
