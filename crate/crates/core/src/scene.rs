//! Scene storage and dataset loading.
//!
//! Scenes persist as pretty-printed JSON with a small header
//! (`version`, `n_main`, `n_env`, `sh_degree`) followed by the canonical
//! splats and both deformation fields. All numeric fields round-trip
//! exactly (shortest-representation f64), so save -> load -> save is
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::deform::{DeformationField, ENV_OUT_DIM, MAIN_OUT_DIM};
use crate::image::{load_normal_map, load_rgb, ImageRgb, NormalMap};
use crate::math::{Mat4, Quat, Vec3, Vec3f};
use crate::splat_math::{sh_coeff_count, RawSplat, Ray, SH_C0};
use crate::{Error, Result};

pub const SCENE_VERSION: u32 = 1;

/// One canonical (time-zero) scene splat. `sh_coeffs` is per-channel:
/// three arrays of `(degree + 1)^2` coefficients each. `rotation` is a
/// unit quaternion in (w, x, y, z) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatPrimitive {
    pub center: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    pub sh_coeffs: [Vec<f64>; 3],
    pub tint_logit: f64,
}

/// Environment splat: same geometry, no specular tint of its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSplat {
    pub center: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    pub sh_coeffs: [Vec<f64>; 3],
}

fn sh_to_coeff_major<T: Real>(sh: &[Vec<f64>; 3]) -> Vec<[T; 3]> {
    (0..sh[0].len())
        .map(|i| [T::lit(sh[0][i]), T::lit(sh[1][i]), T::lit(sh[2][i])])
        .collect()
}

impl SplatPrimitive {
    pub fn to_raw<T: Real>(&self) -> RawSplat<T> {
        RawSplat {
            center: Vec3::from_array(self.center),
            rotation: Quat::from_array(self.rotation),
            log_scale: [T::lit(self.log_scale[0]), T::lit(self.log_scale[1])],
            opacity_logit: T::lit(self.opacity_logit),
            tint_logit: Some(T::lit(self.tint_logit)),
            sh: sh_to_coeff_major(&self.sh_coeffs),
        }
    }
}

impl EnvSplat {
    pub fn to_raw<T: Real>(&self) -> RawSplat<T> {
        RawSplat {
            center: Vec3::from_array(self.center),
            rotation: Quat::from_array(self.rotation),
            log_scale: [T::lit(self.log_scale[0]), T::lit(self.log_scale[1])],
            opacity_logit: T::lit(self.opacity_logit),
            tint_logit: None,
            sh: sh_to_coeff_major(&self.sh_coeffs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sh_degree: usize,
    pub main: Vec<SplatPrimitive>,
    pub env: Vec<EnvSplat>,
    pub deform_main: DeformationField,
    pub deform_env: DeformationField,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    n_main: usize,
    n_env: usize,
    sh_degree: usize,
    main: Vec<SplatPrimitive>,
    env: Vec<EnvSplat>,
    deform_main: DeformationField,
    deform_env: DeformationField,
}

pub(crate) fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_splat(
    path: &Path,
    kind: &str,
    index: usize,
    center: &[f64; 3],
    rotation: &[f64; 4],
    log_scale: &[f64; 2],
    opacity_logit: f64,
    sh: &[Vec<f64>; 3],
    tint_logit: Option<f64>,
    n_coeffs: usize,
) -> Result<()> {
    let bad = |field: &str, msg: String| {
        Err(Error::validation(
            path,
            format!("{} splat {}, {}", kind, index, field),
            msg,
        ))
    };
    if center.iter().any(|v| !v.is_finite()) {
        return bad("center", "non-finite component".into());
    }
    let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
        return bad("rotation", format!("norm {} is not 1 within 1e-9", norm));
    }
    if log_scale.iter().any(|v| !v.is_finite()) {
        return bad("log_scale", "non-finite component".into());
    }
    if !opacity_logit.is_finite() {
        return bad("opacity_logit", "non-finite".into());
    }
    if let Some(t) = tint_logit {
        if !t.is_finite() {
            return bad("tint_logit", "non-finite".into());
        }
    }
    for (ch, coeffs) in sh.iter().enumerate() {
        if coeffs.len() != n_coeffs {
            return bad(
                "sh_coeffs",
                format!(
                    "channel {} has {} coefficients, scene degree needs {}",
                    ch,
                    coeffs.len(),
                    n_coeffs
                ),
            );
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return bad("sh_coeffs", format!("channel {} has non-finite value", ch));
        }
    }
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let file: SceneFile = load_json(path)?;
    if file.version != SCENE_VERSION {
        return Err(Error::validation(
            path,
            "version",
            format!("expected {}, found {}", SCENE_VERSION, file.version),
        ));
    }
    if file.main.len() != file.n_main {
        return Err(Error::validation(
            path,
            "n_main",
            format!("header says {}, file has {}", file.n_main, file.main.len()),
        ));
    }
    if file.env.len() != file.n_env {
        return Err(Error::validation(
            path,
            "n_env",
            format!("header says {}, file has {}", file.n_env, file.env.len()),
        ));
    }
    if file.sh_degree > 2 {
        return Err(Error::validation(
            path,
            "sh_degree",
            format!("{} is above the supported maximum 2", file.sh_degree),
        ));
    }
    let n_coeffs = sh_coeff_count(file.sh_degree);
    for (i, s) in file.main.iter().enumerate() {
        check_splat(
            path,
            "main",
            i,
            &s.center,
            &s.rotation,
            &s.log_scale,
            s.opacity_logit,
            &s.sh_coeffs,
            Some(s.tint_logit),
            n_coeffs,
        )?;
    }
    for (i, s) in file.env.iter().enumerate() {
        check_splat(
            path,
            "env",
            i,
            &s.center,
            &s.rotation,
            &s.log_scale,
            s.opacity_logit,
            &s.sh_coeffs,
            None,
            n_coeffs,
        )?;
    }
    file.deform_main.validate("deform_main")?;
    file.deform_env.validate("deform_env")?;
    if file.deform_main.out_dim != MAIN_OUT_DIM {
        return Err(Error::validation(
            path,
            "deform_main.out_dim",
            format!("expected {}, found {}", MAIN_OUT_DIM, file.deform_main.out_dim),
        ));
    }
    if file.deform_env.out_dim != ENV_OUT_DIM {
        return Err(Error::validation(
            path,
            "deform_env.out_dim",
            format!("expected {}, found {}", ENV_OUT_DIM, file.deform_env.out_dim),
        ));
    }
    Ok(Scene {
        sh_degree: file.sh_degree,
        main: file.main,
        env: file.env,
        deform_main: file.deform_main,
        deform_env: file.deform_env,
    })
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let file = SceneFile {
        version: SCENE_VERSION,
        n_main: scene.main.len(),
        n_env: scene.env.len(),
        sh_degree: scene.sh_degree,
        main: scene.main.clone(),
        env: scene.env.clone(),
        deform_main: scene.deform_main.clone(),
        deform_env: scene.deform_env.clone(),
    };
    save_json(path, &file)
}

impl Scene {
    /// Bounding box of canonical main-splat centers; unit box when empty.
    pub fn bbox_main(&self) -> ([f64; 3], [f64; 3]) {
        if self.main.is_empty() {
            return ([-0.5; 3], [0.5; 3]);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.main {
            for a in 0..3 {
                lo[a] = lo[a].min(s.center[a]);
                hi[a] = hi[a].max(s.center[a]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diag(&self) -> f64 {
        let (lo, hi) = self.bbox_main();
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }
}

pub fn logit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "logit domain: {}", p);
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitConfig {
    pub sh_degree: usize,
    /// Initial sigmoid(opacity_logit).
    pub opacity: f64,
    /// Initial sigmoid(tint_logit).
    pub tint: f64,
    /// Scale used when there are fewer than 4 points.
    pub fallback_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            sh_degree: 1,
            opacity: 0.1,
            tint: 0.1,
            fallback_scale: 0.1,
        }
    }
}

/// Splats from a point cloud: isotropic log-scale from the mean distance
/// to the 3 nearest neighbors, identity rotation, the SH DC term set so
/// the splat reproduces its point color, higher coefficients zero.
/// Distances are all-pairs, which is fine at the supported scene sizes.
pub fn init_from_points(
    points: &[[f64; 3]],
    colors: &[[f64; 3]],
    cfg: &InitConfig,
) -> Result<Vec<SplatPrimitive>> {
    if points.is_empty() {
        return Err(Error::Config("init_from_points: empty point cloud".into()));
    }
    if !colors.is_empty() && colors.len() != points.len() {
        return Err(Error::Config(format!(
            "init_from_points: {} points but {} colors",
            points.len(),
            colors.len()
        )));
    }
    let n_coeffs = sh_coeff_count(cfg.sh_degree);
    let mut out = Vec::with_capacity(points.len());
    let mut dists = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let log_scale = if points.len() < 4 {
            cfg.fallback_scale.ln()
        } else {
            dists.clear();
            for (j, q) in points.iter().enumerate() {
                if i != j {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    dists.push(d2);
                }
            }
            dists.select_nth_unstable_by(2, |a, b| a.partial_cmp(b).unwrap());
            let mean3 = (dists[0].sqrt() + dists[1].sqrt() + dists[2].sqrt()) / 3.0;
            mean3.max(1e-12).ln()
        };
        let color = colors.get(i).copied().unwrap_or([0.5; 3]);
        let mut sh = [
            vec![0.0; n_coeffs],
            vec![0.0; n_coeffs],
            vec![0.0; n_coeffs],
        ];
        for ch in 0..3 {
            sh[ch][0] = color[ch] / SH_C0;
        }
        out.push(SplatPrimitive {
            center: *p,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [log_scale, log_scale],
            opacity_logit: logit(cfg.opacity),
            sh_coeffs: sh,
            tint_logit: logit(cfg.tint),
        });
    }
    Ok(out)
}

/// Environment initialization: splats on a Fibonacci sphere around the
/// scene, disks facing inward, sized to tile the sphere with overlap.
pub fn init_env_sphere(
    center: [f64; 3],
    radius: f64,
    count: usize,
    opacity: f64,
    color: [f64; 3],
    sh_degree: usize,
) -> Vec<EnvSplat> {
    assert!(radius > 0.0 && count > 0);
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let n_coeffs = sh_coeff_count(sh_degree);
    let s = (2.2 * radius / (count as f64).sqrt()).ln();
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let th = golden * i as f64;
            let dir = Vec3::new(r * th.cos(), r * th.sin(), z);
            let pos = [
                center[0] + radius * dir.x,
                center[1] + radius * dir.y,
                center[2] + radius * dir.z,
            ];
            // rotate +z onto the inward normal
            let inward = -dir;
            let d = inward.z; // dot(+z, inward)
            let rotation = if d < -1.0 + 1e-12 {
                [0.0, 1.0, 0.0, 0.0]
            } else {
                let axis = Vec3::new(-inward.y, inward.x, 0.0); // cross(+z, inward)
                let q = Quat::new(1.0 + d, axis.x, axis.y, axis.z);
                let q = q.normalized().expect("non-degenerate by branch");
                [q.w, q.x, q.y, q.z]
            };
            let mut sh = [
                vec![0.0; n_coeffs],
                vec![0.0; n_coeffs],
                vec![0.0; n_coeffs],
            ];
            for ch in 0..3 {
                sh[ch][0] = color[ch] / SH_C0;
            }
            EnvSplat {
                center: pos,
                rotation,
                log_scale: [s, s],
                opacity_logit: logit(opacity),
                sh_coeffs: sh,
            }
        })
        .collect()
}

/// One entry of a camera file (a JSON list of these). `world_to_camera`
/// is row-major, maps world points into a +z-forward camera frame, and
/// must be a rigid transform. `image`/`normal_map` are paths relative to
/// the camera file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: [[f64; 4]; 4],
    pub time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal_map: Option<String>,
}

/// Validated pinhole camera. Rays leave through pixel centers; the depth
/// convention everywhere is distance along the unit ray.
#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Mat4,
    pub time: f64,
}

impl Camera {
    pub fn from_record(path: &Path, index: usize, rec: &CameraRecord) -> Result<Camera> {
        let bad = |field: &str, msg: String| {
            Err(Error::validation(
                path,
                format!("camera {}, {}", index, field),
                msg,
            ))
        };
        if !(rec.fx > 0.0 && rec.fy > 0.0) || !rec.fx.is_finite() || !rec.fy.is_finite() {
            return bad("focal", format!("fx {}, fy {}", rec.fx, rec.fy));
        }
        if !rec.cx.is_finite() || !rec.cy.is_finite() {
            return bad("principal point", "non-finite".into());
        }
        if rec.width == 0 || rec.height == 0 {
            return bad("resolution", format!("{}x{}", rec.width, rec.height));
        }
        if !(0.0..=1.0).contains(&rec.time) {
            return bad("time", format!("{} outside [0, 1]", rec.time));
        }
        let m = rec.world_to_camera;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return bad("world_to_camera", "non-finite entry".into());
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return bad("world_to_camera", "last row must be [0, 0, 0, 1]".into());
        }
        // R^T R == I within 1e-9
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        if worst > 1e-9 {
            return bad(
                "world_to_camera",
                format!("rotation is not orthonormal (deviation {:.3e})", worst),
            );
        }
        Ok(Camera {
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            width: rec.width,
            height: rec.height,
            world_to_camera: Mat4::from_rows(m),
            time: rec.time,
        })
    }

    pub fn rotation_row(&self, i: usize) -> Vec3f {
        let m = &self.world_to_camera.m;
        Vec3::new(m[i][0], m[i][1], m[i][2])
    }

    pub fn translation(&self) -> Vec3f {
        let m = &self.world_to_camera.m;
        Vec3::new(m[0][3], m[1][3], m[2][3])
    }

    /// Camera center in world space: -R^T t.
    pub fn position(&self) -> Vec3f {
        let t = self.translation();
        let r0 = self.rotation_row(0);
        let r1 = self.rotation_row(1);
        let r2 = self.rotation_row(2);
        -Vec3::new(
            r0.x * t.x + r1.x * t.y + r2.x * t.z,
            r0.y * t.x + r1.y * t.y + r2.y * t.z,
            r0.z * t.x + r1.z * t.y + r2.z * t.z,
        )
    }

    /// World-space unit ray through image coordinates (x, y); pass pixel
    /// centers as `px + 0.5`.
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let d_cam = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        let r0 = self.rotation_row(0);
        let r1 = self.rotation_row(1);
        let r2 = self.rotation_row(2);
        // R^T d
        let d_world = Vec3::new(
            r0.x * d_cam.x + r1.x * d_cam.y + r2.x * d_cam.z,
            r0.y * d_cam.x + r1.y * d_cam.y + r2.y * d_cam.z,
            r0.z * d_cam.x + r1.z * d_cam.y + r2.z * d_cam.z,
        );
        Ray::new(self.position(), d_world.normalized().expect("unit focal ray"))
    }

    /// Projects a world point; `None` when it is at or behind the camera
    /// plane. Returns image coordinates and camera-space z.
    pub fn project(&self, p: Vec3f) -> Option<(f64, f64, f64)> {
        let pc = self.world_to_camera.apply_point(p);
        if pc.z <= 1e-12 {
            return None;
        }
        Some((
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
            pc.z,
        ))
    }
}

pub fn load_cameras(path: &Path) -> Result<Vec<(Camera, CameraRecord)>> {
    let records: Vec<CameraRecord> = load_json(path)?;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| Ok((Camera::from_record(path, i, rec)?, rec.clone())))
        .collect()
}

pub fn save_cameras(path: &Path, records: &[CameraRecord]) -> Result<()> {
    save_json(path, &records)
}

/// Point-cloud file: initial positions and optional per-point colors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointsFile {
    pub points: Vec<[f64; 3]>,
    #[serde(default)]
    pub colors: Vec<[f64; 3]>,
}

pub fn load_points(path: &Path) -> Result<PointsFile> {
    load_json(path)
}

pub fn save_points(path: &Path, points: &PointsFile) -> Result<()> {
    save_json(path, points)
}

/// Top-level dataset manifest; all paths relative to its directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetFile {
    pub background: [f64; 3],
    pub cameras: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
}

pub struct Frame {
    pub camera: Camera,
    pub image: ImageRgb,
    pub normal_map: Option<NormalMap>,
    /// Stem of the ground-truth image file; render/eval output naming key.
    pub name: String,
}

pub struct Dataset {
    pub frames: Vec<Frame>,
    pub background: [f64; 3],
    pub scene_path: Option<PathBuf>,
    pub points_path: Option<PathBuf>,
}

/// Loads the manifest, cameras, and every referenced image eagerly so
/// missing or mismatched files fail here rather than mid-training.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file: DatasetFile = load_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let cam_path = dir.join(&file.cameras);
    let cameras = load_cameras(&cam_path)?;
    let cam_dir = cam_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut frames = Vec::with_capacity(cameras.len());
    for (i, (camera, rec)) in cameras.into_iter().enumerate() {
        let image_rel = rec.image.as_ref().ok_or_else(|| {
            Error::validation(&cam_path, format!("camera {}", i), "missing image path")
        })?;
        let image_path = cam_dir.join(image_rel);
        let image = load_rgb(&image_path)?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::Dimension {
                msg: format!(
                    "{}: image is {}x{}, camera {} says {}x{}",
                    image_path.display(),
                    image.width,
                    image.height,
                    i,
                    camera.width,
                    camera.height
                ),
            });
        }
        let normal_map = match &rec.normal_map {
            None => None,
            Some(rel) => {
                let nm_path = cam_dir.join(rel);
                let nm = load_normal_map(&nm_path)?;
                if nm.width != camera.width || nm.height != camera.height {
                    return Err(Error::Dimension {
                        msg: format!(
                            "{}: normal map is {}x{}, camera {} says {}x{}",
                            nm_path.display(),
                            nm.width,
                            nm.height,
                            i,
                            camera.width,
                            camera.height
                        ),
                    });
                }
                Some(nm)
            }
        };
        let name = Path::new(image_rel)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("frame_{:04}", i));
        frames.push(Frame {
            camera,
            image,
            normal_map,
            name,
        });
    }
    Ok(Dataset {
        frames,
        background: file.background,
        scene_path: file.scene.as_ref().map(|s| dir.join(s)),
        points_path: file.points.as_ref().map(|s| dir.join(s)),
    })
}
