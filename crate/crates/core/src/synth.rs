//! Synthetic data: random splat/camera samplers for the equivalence suites
//! and the analytic dataset generator used for end-to-end training tests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{time_cos_index, time_sin_index, DeformationField, FeatureTap, ENV_OUT_DIM, MAIN_OUT_DIM};
use crate::hybrid::oracle_render_hybrid;
use crate::image::{save_pfm_rgb, ImageRgb};
use crate::math::{Mat4, Vec3, Vec3f};
use crate::rasterizer::RenderSettings;
use crate::scene::{
    save_cameras, save_points, save_scene, Camera, CameraRecord, DatasetFile, EnvSplat,
    PointsFile, Scene, SplatPrimitive,
};
use crate::env_tracer::TraceSettings;
use crate::splat_math::{sh_coeff_count, SH_C0};
use crate::{Error, Result};

/// Random unit quaternion, close enough to uniform for test scenes.
pub fn random_rotation<R: Rng>(rng: &mut R) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if (0.2..=1.0).contains(&n) {
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

fn random_sh<R: Rng>(rng: &mut R, degree: usize) -> [Vec<f64>; 3] {
    let count = crate::splat_math::sh_coeff_count(degree);
    let mut sh: [Vec<f64>; 3] = [vec![0.0; count], vec![0.0; count], vec![0.0; count]];
    for channel in sh.iter_mut() {
        channel[0] = rng.gen_range(0.1..1.0) / SH_C0;
        for c in channel.iter_mut().skip(1) {
            *c = rng.gen_range(-0.3..0.3);
        }
    }
    sh
}

/// Main-content splats scattered in a centered cube of the given half
/// extent, with random pose, scale, opacity, tint, and degree-1 appearance.
pub fn sample_main_splats<R: Rng>(rng: &mut R, n: usize, half_extent: f64) -> Vec<SplatPrimitive> {
    (0..n)
        .map(|_| {
            let s = rng.gen_range(0.1f64.ln()..0.6f64.ln());
            SplatPrimitive {
                center: [
                    rng.gen_range(-half_extent..half_extent),
                    rng.gen_range(-half_extent..half_extent),
                    rng.gen_range(-half_extent..half_extent),
                ],
                rotation: random_rotation(rng),
                log_scale: [s, s + rng.gen_range(-0.3..0.3)],
                opacity_logit: rng.gen_range(-1.5..2.5),
                sh_coeffs: random_sh(rng, 1),
                tint_logit: rng.gen_range(-2.0..2.0),
            }
        })
        .collect()
}

/// Environment splats on a shell between the two radii, facing roughly
/// inward only by accident: orientation is fully random.
pub fn sample_env_splats<R: Rng>(
    rng: &mut R,
    n: usize,
    radius_min: f64,
    radius_max: f64,
) -> Vec<EnvSplat> {
    (0..n)
        .map(|_| {
            let dir = loop {
                let v = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if let Some(u) = v.normalized() {
                    if v.norm() > 0.2 {
                        break u;
                    }
                }
            };
            let r = rng.gen_range(radius_min..radius_max);
            let s = rng.gen_range(0.2f64.ln()..1.2f64.ln());
            EnvSplat {
                center: [dir.x * r, dir.y * r, dir.z * r],
                rotation: random_rotation(rng),
                log_scale: [s, s + rng.gen_range(-0.3..0.3)],
                opacity_logit: rng.gen_range(-1.0..3.0),
                sh_coeffs: random_sh(rng, 1),
            }
        })
        .collect()
}

/// Camera at `pos` looking at `target`, +z forward, image y pointing down
/// in world `up` terms. `up` must not be parallel to the view direction.
pub fn look_at_camera(
    pos: Vec3f,
    target: Vec3f,
    up: Vec3f,
    fx: f64,
    width: usize,
    height: usize,
    time: f64,
) -> Camera {
    let f = (target - pos).normalized().expect("camera on target");
    let x = f.cross(up).normalized().expect("up parallel to view");
    let y = f.cross(x);
    let r = [x, y, f];
    let t = Vec3::new(-r[0].dot(pos), -r[1].dot(pos), -r[2].dot(pos));
    let world_to_camera = Mat4::from_rows([
        [x.x, x.y, x.z, t.x],
        [y.x, y.y, y.z, t.y],
        [f.x, f.y, f.z, t.z],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    Camera {
        fx,
        fy: fx,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        world_to_camera,
        time,
    }
}

/// Random orbit camera around `target`, pole-avoiding, for fuzz suites.
pub fn random_camera<R: Rng>(
    rng: &mut R,
    target: Vec3f,
    radius: f64,
    width: usize,
    height: usize,
) -> Camera {
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let inclination = rng.gen_range(0.4..std::f64::consts::PI - 0.4);
    let pos = target
        + Vec3::new(
            radius * inclination.sin() * azimuth.cos(),
            radius * inclination.cos(),
            radius * inclination.sin() * azimuth.sin(),
        );
    let fx = 0.8 * width as f64;
    look_at_camera(pos, target, Vec3::new(0.0, 1.0, 0.0), fx, width, height, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// A high-tint planar cluster that tilts back and forth over time
    /// inside a colorful static environment shell.
    MovingMirror,
    /// A glossy anisotropic plate doing a full in-place revolution, plus
    /// static diffuse anchors.
    SpinningPlate,
    /// Static degree-0 content with the specular branch effectively off.
    DiffuseOnly,
}

fn default_frames() -> usize {
    32
}
fn default_resolution() -> usize {
    96
}
fn default_orbit_radius() -> f64 {
    6.0
}
fn default_orbit_height() -> f64 {
    1.5
}

/// Recipe for one generated dataset. The camera makes a full orbit around
/// the origin while scene time sweeps 0 to 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SceneKind,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_orbit_radius")]
    pub orbit_radius: f64,
    #[serde(default = "default_orbit_height")]
    pub orbit_height: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SceneKind) -> Self {
        SyntheticSpec {
            kind,
            frames: default_frames(),
            resolution: default_resolution(),
            orbit_radius: default_orbit_radius(),
            orbit_height: default_orbit_height(),
            seed: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!(
                "resolution {} below the 16 pixel minimum",
                self.resolution
            )));
        }
        if !(self.orbit_radius > 0.0 && self.orbit_radius.is_finite())
            || !self.orbit_height.is_finite()
        {
            return Err(Error::Config(format!(
                "bad orbit: radius {}, height {}",
                self.orbit_radius, self.orbit_height
            )));
        }
        Ok(())
    }

    /// Scene time of frame `i`; frames span [0, 1] inclusive.
    pub fn time_of(&self, i: usize) -> f64 {
        i as f64 / (self.frames - 1) as f64
    }

    pub fn camera_of(&self, i: usize) -> Camera {
        let theta = std::f64::consts::TAU * i as f64 / self.frames as f64;
        let pos = Vec3::new(
            self.orbit_radius * theta.sin(),
            self.orbit_height,
            self.orbit_radius * theta.cos(),
        );
        look_at_camera(
            pos,
            Vec3::zero(),
            Vec3::new(0.0, 1.0, 0.0),
            0.9 * self.resolution as f64,
            self.resolution,
            self.resolution,
            self.time_of(i),
        )
    }
}

fn env_shell<R: Rng>(
    rng: &mut R,
    n: usize,
    r_min: f64,
    r_max: f64,
    degree: usize,
    opacity_logit: f64,
) -> Vec<EnvSplat> {
    let coeffs = sh_coeff_count(degree);
    (0..n)
        .map(|_| {
            let dir = loop {
                let v: Vec3f = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let n = v.norm();
                if (0.2..=1.0).contains(&n) {
                    break v / n;
                }
            };
            let r = rng.gen_range(r_min..r_max);
            let mut sh: [Vec<f64>; 3] = [vec![0.0; coeffs], vec![0.0; coeffs], vec![0.0; coeffs]];
            for channel in sh.iter_mut() {
                channel[0] = rng.gen_range(0.05..1.0) / SH_C0;
                for c in channel.iter_mut().skip(1) {
                    *c = rng.gen_range(-0.15..0.15);
                }
            }
            EnvSplat {
                center: [dir.x * r, dir.y * r, dir.z * r],
                rotation: random_rotation(rng),
                log_scale: [0.9f64.ln(), 0.9f64.ln() + rng.gen_range(-0.2..0.2)],
                opacity_logit,
                sh_coeffs: sh,
            }
        })
        .collect()
}

fn flat_splat(center: [f64; 3], scale: [f64; 2], color: [f64; 3], opacity: f64, tint: f64, degree: usize) -> SplatPrimitive {
    let coeffs = sh_coeff_count(degree);
    let mut sh: [Vec<f64>; 3] = [vec![0.0; coeffs], vec![0.0; coeffs], vec![0.0; coeffs]];
    for ch in 0..3 {
        sh[ch][0] = color[ch] / SH_C0;
    }
    SplatPrimitive {
        center,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: [scale[0].ln(), scale[1].ln()],
        opacity_logit: opacity,
        sh_coeffs: sh,
        tint_logit: tint,
    }
}

fn identity_field(out_dim: usize) -> DeformationField {
    DeformationField::from_feature_taps(2, 1, out_dim, &[])
}

/// The analytic scene behind a spec. The ground-truth motion is authored
/// through exact feature taps, so deformation at any t is closed-form.
pub fn build_scene(spec: &SyntheticSpec) -> Result<Scene> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = match spec.kind {
        SceneKind::MovingMirror => {
            // 3x3 coplanar cluster; moderate overlap so default early-stop
            // never truncates, keeping fast and exact renders together.
            let mut main = Vec::new();
            for gy in -1i32..=1 {
                for gx in -1i32..=1 {
                    let shade = 0.13 + 0.02 * ((gx + gy) as f64).abs();
                    main.push(flat_splat(
                        [0.75 * gx as f64, 0.75 * gy as f64, 0.0],
                        [0.5, 0.5],
                        [shade, shade, shade + 0.04],
                        3.5,
                        4.0,
                        1,
                    ));
                }
            }
            // d_rotation.x <- 0.35 * sin(pi t): the mirror tilts about x
            // by up to 2*atan(0.35) and returns.
            let deform_main = DeformationField::from_feature_taps(
                2,
                1,
                MAIN_OUT_DIM,
                &[FeatureTap {
                    out: 6,
                    feature: time_sin_index(2, 0),
                    coeff: 0.35,
                }],
            );
            Scene {
                sh_degree: 1,
                main,
                env: env_shell(&mut rng, 120, 7.0, 9.0, 1, 2.0),
                deform_main,
                deform_env: identity_field(ENV_OUT_DIM),
            }
        }
        SceneKind::SpinningPlate => {
            let mut main = vec![flat_splat(
                [0.0, 0.0, 0.0],
                [1.0, 0.55],
                [0.18, 0.2, 0.28],
                3.5,
                3.0,
                1,
            )];
            // Static diffuse anchors behind the plate corners.
            for (i, &(x, y)) in [(-1.3, -1.3), (1.3, -1.3), (-1.3, 1.3), (1.3, 1.3)]
                .iter()
                .enumerate()
            {
                let c = [
                    0.25 + 0.15 * (i % 2) as f64,
                    0.2,
                    0.45 - 0.1 * (i / 2) as f64,
                ];
                main.push(flat_splat([x, y, -0.6], [0.35, 0.35], c, 2.5, -6.0, 1));
            }
            // Residual (cos(pi t) - 1, sin(pi t), 0, 0) on top of the
            // identity quaternion gives exactly (cos pi t, sin pi t, 0, 0):
            // a full revolution about x as t sweeps 0..1. The -1 rides in
            // the head bias, which feature taps leave free.
            let mut deform_main = DeformationField::from_feature_taps(
                2,
                1,
                MAIN_OUT_DIM,
                &[
                    FeatureTap {
                        out: 5,
                        feature: time_cos_index(2, 0),
                        coeff: 1.0,
                    },
                    FeatureTap {
                        out: 6,
                        feature: time_sin_index(2, 0),
                        coeff: 1.0,
                    },
                ],
            );
            deform_main.layers.last_mut().unwrap().b[5] = -1.0;
            Scene {
                sh_degree: 1,
                main,
                env: env_shell(&mut rng, 150, 7.0, 9.0, 1, 2.0),
                deform_main,
                deform_env: identity_field(ENV_OUT_DIM),
            }
        }
        SceneKind::DiffuseOnly => {
            let mut main = Vec::new();
            for i in 0..12 {
                let a = std::f64::consts::TAU * i as f64 / 12.0;
                let r = 0.45 + 0.35 * ((i * 7) % 5) as f64 / 4.0;
                let c = [
                    0.2 + 0.6 * ((i * 3) % 7) as f64 / 6.0,
                    0.2 + 0.6 * ((i * 5) % 7) as f64 / 6.0,
                    0.2 + 0.6 * (i % 7) as f64 / 6.0,
                ];
                let mut s = flat_splat(
                    [r * a.cos(), 0.5 * (a * 3.0).sin(), r * a.sin()],
                    [0.4, 0.3],
                    c,
                    2.5,
                    -10.0,
                    0,
                );
                s.rotation = random_rotation(&mut rng);
                main.push(s);
            }
            Scene {
                sh_degree: 0,
                main,
                env: env_shell(&mut rng, 60, 7.0, 9.0, 0, 2.0),
                deform_main: identity_field(MAIN_OUT_DIM),
                deform_env: identity_field(ENV_OUT_DIM),
            }
        }
    };
    Ok(scene)
}

/// Where [`generate_synthetic`] put everything.
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub scene_path: PathBuf,
}

fn record_of(camera: &Camera, image: String, normal_map: String) -> CameraRecord {
    CameraRecord {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx,
        cy: camera.cy,
        width: camera.width,
        height: camera.height,
        world_to_camera: camera.world_to_camera.m,
        time: camera.time,
        image: Some(image),
        normal_map: Some(normal_map),
    }
}

/// Renders the spec's scene once per frame with the exhaustive reference
/// renderer and writes a complete dataset directory: ground-truth frames
/// and normal maps (PFM), train/test camera lists (every 8th frame held
/// out), the scene file, an init point cloud, and the two manifests.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.check()?;
    let scene = build_scene(spec)?;
    fs::create_dir_all(out_dir.join("frames")).map_err(|e| Error::io(out_dir, e))?;
    fs::create_dir_all(out_dir.join("normals")).map_err(|e| Error::io(out_dir, e))?;

    let render_settings = RenderSettings::default();
    let trace_settings = TraceSettings::for_scene_diagonal(scene.bbox_diag());
    let rendered = crate::parallel::map_indexed(spec.frames, |i| {
        let camera = spec.camera_of(i);
        oracle_render_hybrid(&scene, spec.time_of(i), &camera, &render_settings, &trace_settings)
    });

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, result) in rendered.into_iter().enumerate() {
        let out = result?;
        let name = format!("frame_{:04}", i);
        let image_rel = format!("frames/{}.pfm", name);
        let normal_rel = format!("normals/{}.pfm", name);
        save_pfm_rgb(&out_dir.join(&image_rel), &out.image)?;
        let normals = ImageRgb {
            width: out.image.width,
            height: out.image.height,
            data: out.buffers.normal.iter().map(|n| [n.x, n.y, n.z]).collect(),
        };
        save_pfm_rgb(&out_dir.join(&normal_rel), &normals)?;
        let rec = record_of(&spec.camera_of(i), image_rel, normal_rel);
        if i % 8 == 0 {
            test.push(rec);
        } else {
            train.push(rec);
        }
    }

    let scene_path = out_dir.join("scene_gt.json");
    save_scene(&scene_path, &scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e3779b97f4a7c15);
    let points = PointsFile {
        points: scene
            .main
            .iter()
            .map(|s| {
                [
                    s.center[0] + rng.gen_range(-0.05..0.05),
                    s.center[1] + rng.gen_range(-0.05..0.05),
                    s.center[2] + rng.gen_range(-0.05..0.05),
                ]
            })
            .collect(),
        colors: scene
            .main
            .iter()
            .map(|s| {
                [
                    (s.sh_coeffs[0][0] * SH_C0).clamp(0.0, 1.0),
                    (s.sh_coeffs[1][0] * SH_C0).clamp(0.0, 1.0),
                    (s.sh_coeffs[2][0] * SH_C0).clamp(0.0, 1.0),
                ]
            })
            .collect(),
    };
    save_points(&out_dir.join("points.json"), &points)?;
    save_cameras(&out_dir.join("cameras_train.json"), &train)?;
    save_cameras(&out_dir.join("cameras_test.json"), &test)?;

    let manifest = |cameras: &str| DatasetFile {
        background: render_settings.background,
        cameras: cameras.into(),
        scene: Some("scene_gt.json".into()),
        points: Some("points.json".into()),
    };
    let train_manifest = out_dir.join("dataset.json");
    let test_manifest = out_dir.join("dataset_test.json");
    crate::scene::save_json(&train_manifest, &manifest("cameras_train.json"))?;
    crate::scene::save_json(&test_manifest, &manifest("cameras_test.json"))?;
    Ok(SynthOutput {
        train_manifest,
        test_manifest,
        scene_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn look_at_rotation_is_orthonormal_and_centers_target() {
        let cam = look_at_camera(
            Vec3::new(3.0, 2.0, -4.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            40.0,
            64,
            48,
            0.0,
        );
        for i in 0..3 {
            for j in 0..3 {
                let d = cam.rotation_row(i).dot(cam.rotation_row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
        assert!((cam.position() - Vec3::new(3.0, 2.0, -4.0)).norm() < 1e-9);
        let (px, py, _) = cam.project(Vec3::new(0.0, 0.0, 0.0)).unwrap();
        assert!((px - 32.0).abs() < 1e-9 && (py - 24.0).abs() < 1e-9);
    }

    #[test]
    fn generated_ground_truth_is_reproduced_by_the_fast_renderer() {
        let mut spec = SyntheticSpec::new(SceneKind::MovingMirror);
        spec.frames = 4;
        spec.resolution = 24;
        spec.seed = 3;
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&spec, dir.path()).unwrap();
        let dataset = crate::scene::load_dataset(&out.train_manifest).unwrap();
        assert_eq!(dataset.frames.len(), 3, "frame 0 is held out");
        let scene = crate::scene::load_scene(&dataset.scene_path.clone().unwrap()).unwrap();

        // Exact-mode fast path: no early stop, gather everything. The
        // remaining difference is PFM's f32 quantization.
        let mut rs = RenderSettings::default();
        rs.background = dataset.background;
        rs.early_stop = 0.0;
        let mut ts = TraceSettings::for_scene_diagonal(scene.bbox_diag());
        ts.early_stop = 0.0;
        ts.k = scene.env.len().max(1);
        for frame in &dataset.frames {
            let got =
                crate::hybrid::render_hybrid(&scene, frame.camera.time, &frame.camera, &rs, &ts)
                    .unwrap();
            let mut worst = 0.0f64;
            for (a, b) in got.image.data.iter().zip(&frame.image.data) {
                for ch in 0..3 {
                    worst = worst.max((a[ch] - b[ch]).abs());
                }
            }
            assert!(worst < 1e-6, "{}: max abs {:.3e}", frame.name, worst);

            let nm = frame.normal_map.as_ref().unwrap();
            for (i, n) in got.buffers.normal.iter().enumerate() {
                if nm.valid[i] {
                    let d = n.x * nm.dirs[i][0] + n.y * nm.dirs[i][1] + n.z * nm.dirs[i][2];
                    assert!(d > 1.0 - 1e-9, "normal mismatch at {}: dot {}", i, d);
                } else {
                    assert!(n.norm() < 1e-6, "stored map dropped a real normal");
                }
            }
        }
    }

    #[test]
    fn split_holds_out_every_eighth_frame() {
        let mut spec = SyntheticSpec::new(SceneKind::DiffuseOnly);
        spec.frames = 17;
        spec.resolution = 16;
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&spec, dir.path()).unwrap();
        let train = crate::scene::load_dataset(&out.train_manifest).unwrap();
        let test = crate::scene::load_dataset(&out.test_manifest).unwrap();
        assert_eq!(test.frames.len(), 3); // frames 0, 8, 16
        assert_eq!(train.frames.len(), 14);
        for f in &test.frames {
            assert!(["frame_0000", "frame_0008", "frame_0016"].contains(&f.name.as_str()));
        }
        let all: std::collections::HashSet<_> = train
            .frames
            .iter()
            .chain(&test.frames)
            .map(|f| f.name.clone())
            .collect();
        assert_eq!(all.len(), 17);
        // Time parameterization covers [0, 1] at equal spacing.
        assert_eq!(spec.time_of(0), 0.0);
        assert_eq!(spec.time_of(16), 1.0);
    }

    #[test]
    fn diffuse_only_scenes_have_the_specular_branch_off() {
        let spec = SyntheticSpec::new(SceneKind::DiffuseOnly);
        let scene = build_scene(&spec).unwrap();
        assert_eq!(scene.sh_degree, 0);
        assert!(scene.main.iter().all(|s| s.tint_logit == -10.0));
        assert!(scene.main.iter().all(|s| s.sh_coeffs[0].len() == 1));
    }

    #[test]
    fn authored_motions_match_their_closed_forms() {
        let spec = SyntheticSpec::new(SceneKind::MovingMirror);
        let scene = build_scene(&spec).unwrap();
        let normal_at = |t: f64| {
            let (main, _) = crate::deform::deform_scene(&scene, t).unwrap();
            main[4].t_w // center splat of the 3x3 cluster
        };
        // Tilt angle about x is 2*atan(0.35 sin(pi t)); its cosine against
        // the rest normal has the closed form (1-c^2)/(1+c^2).
        let n0 = normal_at(0.0);
        assert!((n0 - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let c = 0.35f64; // sin(pi/2) = 1 at t = 0.5
        let expect = (1.0 - c * c) / (1.0 + c * c);
        assert!((n0.dot(normal_at(0.5)) - expect).abs() < 1e-12);
        assert!((n0.dot(normal_at(1.0)) - 1.0).abs() < 1e-12);

        let spin = build_scene(&SyntheticSpec::new(SceneKind::SpinningPlate)).unwrap();
        let plate_normal = |t: f64| {
            let (main, _) = crate::deform::deform_scene(&spin, t).unwrap();
            main[0].t_w
        };
        let p0 = plate_normal(0.0);
        assert!((p0 - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        // Full revolution about x: quarter turn at t = 0.25, flip at 0.5.
        assert!(plate_normal(0.25).dot(p0).abs() < 1e-9);
        assert!((plate_normal(0.5).dot(p0) + 1.0).abs() < 1e-9);
        assert!((plate_normal(1.0).dot(p0) - 1.0).abs() < 1e-9);
        // Anchors do spin in place but never translate.
        let (m0, _) = crate::deform::deform_scene(&spin, 0.0).unwrap();
        let (m5, _) = crate::deform::deform_scene(&spin, 0.5).unwrap();
        assert!((m0[1].center - m5[1].center).norm() < 1e-12);
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let mut spec = SyntheticSpec::new(SceneKind::SpinningPlate);
        spec.frames = 3;
        spec.resolution = 16;
        spec.seed = 11;
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&spec, da.path()).unwrap();
        generate_synthetic(&spec, db.path()).unwrap();
        for rel in [
            "scene_gt.json",
            "points.json",
            "cameras_train.json",
            "cameras_test.json",
            "dataset.json",
            "frames/frame_0001.pfm",
            "normals/frame_0002.pfm",
        ] {
            let a = std::fs::read(da.path().join(rel)).unwrap();
            let b = std::fs::read(db.path().join(rel)).unwrap();
            assert_eq!(a, b, "{} differs between identical runs", rel);
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = SyntheticSpec::new(SceneKind::MovingMirror);
        spec.frames = 1;
        assert!(spec.check().is_err());
        let mut spec = SyntheticSpec::new(SceneKind::MovingMirror);
        spec.resolution = 8;
        assert!(spec.check().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(&spec, dir.path()).is_err());
    }

    #[test]
    fn spec_json_round_trips_with_defaults() {
        let spec: SyntheticSpec =
            serde_json::from_str(r#"{"kind": "moving_mirror", "seed": 5}"#).unwrap();
        assert_eq!(spec.kind, SceneKind::MovingMirror);
        assert_eq!(spec.frames, 32);
        assert_eq!(spec.resolution, 96);
        assert_eq!(spec.seed, 5);
        let text = serde_json::to_string(&spec).unwrap();
        let back: SyntheticSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.kind, spec.kind);
        assert_eq!(back.orbit_radius, spec.orbit_radius);
    }

    #[test]
    fn samplers_produce_valid_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mains = sample_main_splats(&mut rng, 20, 1.0);
        let envs = sample_env_splats(&mut rng, 20, 4.0, 6.0);
        for m in &mains {
            let q = &m.rotation;
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        for e in &envs {
            let c: Vec3f = Vec3::from_array(e.center);
            let r = c.norm();
            assert!((4.0..6.0).contains(&r));
        }
    }
}
