//! Command-line front end: dataset synthesis, training, rendering,
//! evaluation, a built-in consistency check, and stage timings.
//!
//! Every subcommand is a thin wrapper over library calls; nothing here adds
//! behavior the library does not already expose. Exit codes: 0 on success,
//! 1 on a runtime failure (bad paths, malformed files, a failed check),
//! 2 on a command-line usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::autodiff::{grad_check, Real, Tape};
use crate::deform::{deform_scene, deform_splats, DeformationField, ENV_OUT_DIM, MAIN_OUT_DIM};
use crate::env_tracer::{brute_force_trace, build_bvh, trace_specular_parallel, TraceSettings};
use crate::hybrid::{oracle_render_hybrid, render_hybrid, render_hybrid_buffers};
use crate::image::{save_pfm_gray, save_pfm_rgb, ImageRgb, NormalMap};
use crate::losses::{total_loss, LossWeights};
use crate::math::{Quat, Vec3, Vec3f};
use crate::metrics::{evaluate, psnr, ssim};
use crate::rasterizer::{oracle_render, render_parallel, RenderSettings};
use crate::scene::{load_cameras, load_dataset, load_scene, save_scene, Scene};
use crate::splat_math::{reflect, sh_coeff_count, RawSplat, Surfel, SH_C0};
use crate::synth::{generate_synthetic, SceneKind, SyntheticSpec};
use crate::trainer::{
    flatten_group, init_scene, lift_scene, train, LearningRates, Phase, SceneInit, TrainConfig,
    ALL_GROUPS,
};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "splatray",
    version,
    about = "Deformable Gaussian surfel renderer with ray-traced specular transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec (JSON)
    Synth {
        /// Spec file; see `SyntheticSpec` for the accepted fields
        spec: PathBuf,
        /// Output directory for frames, manifests, and the scene file
        out_dir: PathBuf,
    },
    /// Optimize a scene against a dataset
    Train {
        /// Run config (JSON); paths inside are relative to the file
        config: PathBuf,
    },
    /// Render every camera of a camera file with a trained scene
    Render {
        scene: PathBuf,
        cameras: PathBuf,
        out_dir: PathBuf,
        /// Also write diffuse/depth/normal/alpha_spec buffers per frame
        #[arg(long)]
        buffers: bool,
    },
    /// Score rendered frames against ground truth by matching file stems
    Eval {
        renders: PathBuf,
        gt: PathBuf,
    },
    /// Run the built-in oracle-equivalence and gradient checks
    Check,
    /// Time the pipeline stages and print a stage,ms table
    Bench,
}

/// Parses and executes `args`, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders usage itself, both for --help and for errors.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Synth { spec, out_dir } => cmd_synth(&spec, &out_dir),
        Command::Train { config } => cmd_train(&config),
        Command::Render {
            scene,
            cameras,
            out_dir,
            buffers,
        } => cmd_render(&scene, &cameras, &out_dir, buffers),
        Command::Eval { renders, gt } => cmd_eval(&renders, &gt),
        Command::Check => cmd_check(),
        Command::Bench => cmd_bench(),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("run 'splatray --help' for usage");
            1
        }
    }
}

pub fn main() {
    std::process::exit(run(std::env::args()));
}

fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<i32> {
    let spec: SyntheticSpec = crate::scene::load_json(spec_path)?;
    let started = Instant::now();
    let out = generate_synthetic(&spec, out_dir)?;
    println!(
        "generated {} frames ({} train / {} held out) in {:.1}s",
        spec.frames,
        spec.frames - spec.frames.div_ceil(8),
        spec.frames.div_ceil(8),
        started.elapsed().as_secs_f64()
    );
    println!("train manifest: {}", out.train_manifest.display());
    println!("test manifest:  {}", out.test_manifest.display());
    println!("scene:          {}", out.scene_path.display());
    Ok(0)
}

/// On-disk training run description. Relative paths resolve against the
/// config file's directory. Omitted fields keep library defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    dataset: PathBuf,
    out_dir: PathBuf,
    total_steps: usize,
    #[serde(default)]
    seed: u64,
    /// Starting scene; when absent one is built from the dataset's points.
    #[serde(default)]
    scene: Option<PathBuf>,
    #[serde(default)]
    init: SceneInit,
    #[serde(default)]
    weights: Option<LossWeights>,
    #[serde(default)]
    rates: Option<LearningRates>,
    #[serde(default)]
    diffuse_end: Option<f64>,
    #[serde(default)]
    specular_end: Option<f64>,
    #[serde(default)]
    tint_trainable_in_diffuse: bool,
    #[serde(default)]
    disable_specular: bool,
    #[serde(default)]
    prune_threshold: Option<f64>,
    #[serde(default)]
    prune_interval: Option<usize>,
    #[serde(default)]
    prune_min_count: Option<usize>,
    #[serde(default)]
    checkpoint_interval: Option<usize>,
}

fn cmd_train(config_path: &Path) -> Result<i32> {
    let tf: TrainFile = crate::scene::load_json(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let dataset = load_dataset(&base.join(&tf.dataset))?;
    let scene = match &tf.scene {
        Some(p) => load_scene(&base.join(p))?,
        None => init_scene(&dataset, &tf.init)?,
    };

    let mut config = TrainConfig::new(tf.total_steps);
    config.seed = tf.seed;
    config.trace = TraceSettings::for_scene_diagonal(scene.bbox_diag());
    config.tint_trainable_in_diffuse = tf.tint_trainable_in_diffuse;
    config.disable_specular = tf.disable_specular;
    if let Some(w) = tf.weights {
        config.weights = w;
    }
    if let Some(r) = tf.rates {
        config.rates = r;
    }
    if let Some(v) = tf.diffuse_end {
        config.schedule.diffuse_end = v;
    }
    if let Some(v) = tf.specular_end {
        config.schedule.specular_end = v;
    }
    if let Some(v) = tf.prune_threshold {
        config.prune_threshold = v;
    }
    if let Some(v) = tf.prune_interval {
        config.prune_interval = v;
    }
    if let Some(v) = tf.prune_min_count {
        config.prune_min_count = v;
    }
    if let Some(v) = tf.checkpoint_interval {
        config.checkpoint_interval = v;
    }
    let out_dir = base.join(&tf.out_dir);
    config.out_dir = Some(out_dir.clone());

    println!(
        "training {} steps on {} frames ({} main / {} env splats at start)",
        tf.total_steps,
        dataset.frames.len(),
        scene.main.len(),
        scene.env.len()
    );
    let started = Instant::now();
    let outcome = train(&dataset, scene, &config)?;
    let final_path = out_dir.join("scene_final.json");
    save_scene(&final_path, &outcome.scene)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "done in {:.1}s; final loss {:.6} ({} main / {} env splats)",
            started.elapsed().as_secs_f64(),
            last.report.total,
            last.n_main,
            last.n_env
        );
    }
    println!("scene: {}", final_path.display());
    println!("log:   {}", out_dir.join("train_log.csv").display());
    Ok(0)
}

fn cmd_render(scene_path: &Path, cameras_path: &Path, out_dir: &Path, buffers: bool) -> Result<i32> {
    let scene = load_scene(scene_path)?;
    let cameras = load_cameras(cameras_path)?;
    if cameras.is_empty() {
        return Err(Error::Config("camera file lists no cameras".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let buf_dir = out_dir.join("buffers");
    if buffers {
        fs::create_dir_all(&buf_dir).map_err(|e| Error::io(&buf_dir, e))?;
    }
    let rs = RenderSettings::default();
    let ts = TraceSettings::for_scene_diagonal(scene.bbox_diag());
    for (i, (camera, record)) in cameras.iter().enumerate() {
        let clock = Instant::now();
        let out = render_hybrid(&scene, camera.time, camera, &rs, &ts)?;
        let name = record
            .image
            .as_deref()
            .and_then(|p| Path::new(p).file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("frame_{i:04}"));
        save_pfm_rgb(&out_dir.join(format!("{name}.pfm")), &out.image)?;
        if buffers {
            let b = &out.buffers;
            save_pfm_rgb(&buf_dir.join(format!("{name}_diffuse.pfm")), &b.diffuse_image())?;
            save_pfm_gray(&buf_dir.join(format!("{name}_depth.pfm")), &b.depth_image())?;
            save_pfm_rgb(&buf_dir.join(format!("{name}_normal.pfm")), &b.normal_image())?;
            save_pfm_gray(
                &buf_dir.join(format!("{name}_alpha_spec.pfm")),
                &b.alpha_spec_image(),
            )?;
        }
        println!("{name}.pfm  {:.0} ms", clock.elapsed().as_secs_f64() * 1e3);
    }
    Ok(0)
}

fn cmd_eval(renders: &Path, gt: &Path) -> Result<i32> {
    let report = evaluate(renders, gt)?;
    println!("{:<28} {:>9} {:>9}", "frame", "psnr", "ssim");
    for f in &report.frames {
        println!("{:<28} {:>9.3} {:>9.4}", f.name, f.psnr, f.ssim);
    }
    println!("{:<28} {:>9.3} {:>9.4}", "mean", report.mean_psnr, report.mean_ssim);
    println!("{:.1} ms/frame", report.ms_per_frame);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(0)
}

// ---- check ----------------------------------------------------------------

struct CheckSheet {
    failures: usize,
}

impl CheckSheet {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name} ({detail})", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn cmd_check() -> Result<i32> {
    let mut sheet = CheckSheet { failures: 0 };

    let (pass, detail) = check_reflection();
    sheet.record("reflection-invariants", pass, detail);

    let (pass, detail) = check_autodiff();
    sheet.record("autodiff-finite-differences", pass, detail);

    let (pass, detail) = check_raster_oracle()?;
    sheet.record("rasterizer-vs-oracle", pass, detail);

    let (pass, detail) = check_trace_oracle()?;
    sheet.record("tracer-vs-brute-force", pass, detail);

    let (pass, detail) = check_hybrid_oracle()?;
    sheet.record("hybrid-vs-oracle", pass, detail);

    let (pass, detail) = check_pipeline_gradients()?;
    sheet.record("pipeline-gradients-vs-fd", pass, detail);

    let (pass, detail) = check_metrics();
    sheet.record("metric-fixed-points", pass, detail);

    if sheet.failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{} check(s) failed", sheet.failures);
        Ok(1)
    }
}

fn unit_dir<R: Rng>(rng: &mut R) -> Vec3f {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if (0.2..=1.0).contains(&n) {
            return v / n;
        }
    }
}

fn check_reflection() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let d = unit_dir(&mut rng);
        let n = unit_dir(&mut rng);
        let r = reflect(d, n);
        let back = reflect(r, n);
        worst = worst.max((back - d).norm());
        worst = worst.max((r.norm() - 1.0).abs());
        worst = worst.max((r.dot(n) + d.dot(n)).abs());
    }
    (worst < 1e-12, format!("worst deviation {worst:.2e} over 1e5 pairs"))
}

fn check_autodiff() -> (bool, String) {
    let report = grad_check(
        |x| {
            let a = x[0] * x[1] + (x[2] * Real::lit(0.5)).sin();
            let b = (x[0] * x[0] + Real::lit(1.2)).sqrt() * (-x[1]).exp();
            a * b + (a * a + Real::lit(0.3)).ln()
        },
        &[0.7, -0.4, 1.3],
    );
    (
        report.passes(1e-6),
        format!("max rel err {:.2e}", report.max_rel_err),
    )
}

/// Random splats strewn in front of the probe camera.
fn scatter_splats<R: Rng>(rng: &mut R, n: usize, coeffs: usize, tint: bool) -> Vec<Surfel<f64>> {
    (0..n)
        .map(|_| {
            let sh: Vec<[f64; 3]> = (0..coeffs)
                .map(|c| {
                    let base = if c == 0 { 0.5 / SH_C0 } else { 0.0 };
                    [
                        base + rng.gen_range(-0.25..0.25),
                        base + rng.gen_range(-0.25..0.25),
                        base + rng.gen_range(-0.25..0.25),
                    ]
                })
                .collect();
            RawSplat {
                center: Vec3::new(
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.0..1.0),
                ),
                rotation: Quat::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                log_scale: [rng.gen_range(-1.6..-0.4), rng.gen_range(-1.6..-0.4)],
                opacity_logit: rng.gen_range(-1.0..2.5),
                tint_logit: tint.then(|| rng.gen_range(-2.0..2.0)),
                sh,
            }
            .activate()
        })
        .collect()
}

fn probe_camera(size: usize) -> crate::scene::Camera {
    let spec = SyntheticSpec {
        resolution: size,
        orbit_radius: 4.0,
        orbit_height: 0.0,
        ..SyntheticSpec::new(SceneKind::DiffuseOnly)
    };
    spec.camera_of(0)
}

fn check_raster_oracle() -> Result<(bool, String)> {
    let camera = probe_camera(32);
    let settings = RenderSettings {
        early_stop: 0.0,
        ..RenderSettings::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let splats = scatter_splats(&mut rng, 30, sh_coeff_count(1), true);
        let fast = render_parallel(&splats, &camera, &settings)?;
        let slow = oracle_render(&splats, &camera, &settings)?;
        for i in 0..fast.diffuse.len() {
            for ch in 0..3 {
                worst = worst.max((fast.diffuse[i][ch] - slow.diffuse[i][ch]).abs());
            }
            worst = worst.max((fast.alpha[i] - slow.alpha[i]).abs());
            worst = worst.max((fast.alpha_spec[i] - slow.alpha_spec[i]).abs());
            worst = worst.max((fast.normal[i] - slow.normal[i]).norm());
        }
    }
    Ok((worst < 1e-6, format!("max abs diff {worst:.2e}, 5 scenes at 32x32")))
}

fn check_trace_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let env: Vec<Surfel<f64>> = (0..200)
        .map(|_| {
            let dir = unit_dir(&mut rng);
            RawSplat {
                center: Vec3::new(dir.x * 6.0, dir.y * 6.0, dir.z * 6.0),
                rotation: Quat::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                log_scale: [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
                opacity_logit: rng.gen_range(-1.0..2.0),
                tint_logit: None,
                sh: vec![[
                    rng.gen_range(0.1..1.2),
                    rng.gen_range(0.1..1.2),
                    rng.gen_range(0.1..1.2),
                ]],
            }
            .activate()
        })
        .collect();
    let settings = TraceSettings {
        k: 16,
        early_stop: 0.0,
        ..TraceSettings::for_scene_diagonal(12.0)
    };
    let bvh = build_bvh(&env, &settings);
    let origins: Vec<Vec3f> = (0..500)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let dirs: Vec<Vec3f> = (0..500).map(|_| unit_dir(&mut rng)).collect();
    let (colors, trans) = trace_specular_parallel(&origins, &dirs, &env, &bvh, &settings)?;
    let mut worst = 0.0f64;
    for i in 0..origins.len() {
        let (bc, bt) = brute_force_trace(origins[i], dirs[i], &env, &settings);
        for ch in 0..3 {
            worst = worst.max((colors[i][ch] - bc[ch]).abs());
        }
        worst = worst.max((trans[i] - bt).abs());
    }
    Ok((worst < 1e-9, format!("max abs diff {worst:.2e}, 500 rays vs 200 splats")))
}

fn check_hybrid_oracle() -> Result<(bool, String)> {
    let spec = SyntheticSpec {
        frames: 4,
        resolution: 24,
        ..SyntheticSpec::new(SceneKind::MovingMirror)
    };
    let scene = crate::synth::build_scene(&spec)?;
    let camera = spec.camera_of(1);
    let rs = RenderSettings {
        early_stop: 0.0,
        ..RenderSettings::default()
    };
    let ts = TraceSettings {
        early_stop: 0.0,
        k: scene.env.len(),
        ..TraceSettings::for_scene_diagonal(scene.bbox_diag())
    };
    let t = spec.time_of(1);
    let fast = render_hybrid(&scene, t, &camera, &rs, &ts)?;
    let slow = oracle_render_hybrid(&scene, t, &camera, &rs, &ts)?;
    let mut worst = 0.0f64;
    for (a, b) in fast.image.data.iter().zip(&slow.image.data) {
        for ch in 0..3 {
            worst = worst.max((a[ch] - b[ch]).abs());
        }
    }
    Ok((worst < 1e-6, format!("max abs diff {worst:.2e} at 24x24")))
}

/// Small scene with strong specular coverage, built for gradient probing.
fn gradient_probe_scene() -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let coeffs = sh_coeff_count(1);
    let main: Vec<_> = (0..3)
        .map(|i| {
            let raw = RawSplat {
                center: Vec3::new(-0.7 + 0.7 * i as f64, 0.2 * i as f64 - 0.2, 0.3 * i as f64),
                rotation: Quat::new(1.0, 0.15 * i as f64, -0.1, 0.05),
                log_scale: [-0.2, -0.35],
                opacity_logit: 2.0,
                tint_logit: Some(0.5),
                sh: (0..coeffs)
                    .map(|c| {
                        let base = if c == 0 { 0.6 / SH_C0 } else { 0.0 };
                        [
                            base + rng.gen_range(-0.2..0.2),
                            base + rng.gen_range(-0.2..0.2),
                            base + rng.gen_range(-0.2..0.2),
                        ]
                    })
                    .collect(),
            };
            crate::scene::SplatPrimitive {
                center: [raw.center.x, raw.center.y, raw.center.z],
                rotation: [raw.rotation.w, raw.rotation.x, raw.rotation.y, raw.rotation.z],
                log_scale: raw.log_scale,
                opacity_logit: raw.opacity_logit,
                sh_coeffs: split_channels(&raw.sh),
                tint_logit: raw.tint_logit.unwrap(),
            }
        })
        .collect();
    let env: Vec<_> = (0..4)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / 4.0;
            crate::scene::EnvSplat {
                center: [5.0 * th.cos(), 1.0 - 0.5 * i as f64, 5.0 * th.sin()],
                rotation: [1.0, 0.1 * i as f64, 0.0, -0.05],
                log_scale: [1.2, 1.0],
                opacity_logit: 1.5,
                sh_coeffs: [
                    (0..coeffs).map(|_| rng.gen_range(0.2..1.0)).collect(),
                    (0..coeffs).map(|_| rng.gen_range(0.2..1.0)).collect(),
                    (0..coeffs).map(|_| rng.gen_range(0.2..1.0)).collect(),
                ],
            }
        })
        .collect();
    Scene {
        sh_degree: 1,
        main,
        env,
        deform_main: DeformationField::new(2, 1, &[6], MAIN_OUT_DIM, &mut rng),
        deform_env: DeformationField::new(2, 1, &[6], ENV_OUT_DIM, &mut rng),
    }
}

fn split_channels(sh: &[[f64; 3]]) -> [Vec<f64>; 3] {
    let mut out = [
        Vec::with_capacity(sh.len()),
        Vec::with_capacity(sh.len()),
        Vec::with_capacity(sh.len()),
    ];
    for row in sh {
        for ch in 0..3 {
            out[ch].push(row[ch]);
        }
    }
    out
}

fn check_pipeline_gradients() -> Result<(bool, String)> {
    let scene = gradient_probe_scene();
    let camera = probe_camera(16);
    let rs = RenderSettings::default();
    let ts = TraceSettings {
        k: 4,
        ..TraceSettings::for_scene_diagonal(scene.bbox_diag())
    };
    let t = 0.4;
    let weights = LossWeights::default();

    // The target comes from a perturbed copy so every loss term is active.
    let mut bumped = scene.clone();
    for g in ALL_GROUPS {
        let mut vals = flatten_group(&bumped, g);
        for (i, v) in vals.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 0.77).sin();
        }
        crate::trainer::write_group(&mut bumped, g, &vals);
    }
    let (bm, be) = deform_scene(&bumped, t)?;
    let target = render_hybrid_buffers(&bm, &be, &camera, &rs, &ts)?;
    let gt = ImageRgb {
        width: camera.width,
        height: camera.height,
        data: target.final_color.clone(),
    };
    let gt_normals = NormalMap {
        width: camera.width,
        height: camera.height,
        dirs: target.raster.normal.iter().map(|n| [n.x, n.y, n.z]).collect(),
        valid: target
            .raster
            .alpha
            .iter()
            .map(|&a| a > rs.alpha_mask_threshold)
            .collect(),
    };

    let loss_of = |s: &Scene| -> Result<f64> {
        let (m, e) = deform_scene(s, t)?;
        let hb = render_hybrid_buffers(&m, &e, &camera, &rs, &ts)?;
        let (total, _) = total_loss(
            &hb.raster,
            Some(&hb.final_color),
            &camera,
            &gt,
            Some(&gt_normals),
            &weights,
            Phase::Joint,
            rs.alpha_mask_threshold,
        )?;
        Ok(total)
    };

    // One backward pass gives every analytic gradient.
    let tape = Tape::new();
    let lifted = lift_scene(&tape, &scene, &ALL_GROUPS);
    let tv = <crate::autodiff::Var<'_> as Real>::lit(t);
    let main = deform_splats(&lifted.main, &scene.deform_main, &lifted.field_main, tv)?;
    let env = deform_splats(&lifted.env, &scene.deform_env, &lifted.field_env, tv)?;
    let hb = render_hybrid_buffers(&main, &env, &camera, &rs, &ts)?;
    let (total, _) = total_loss(
        &hb.raster,
        Some(&hb.final_color),
        &camera,
        &gt,
        Some(&gt_normals),
        &weights,
        Phase::Joint,
        rs.alpha_mask_threshold,
    )?;
    let grads = tape.backward(total);
    let analytic: Vec<Vec<f64>> = lifted
        .group_vars
        .iter()
        .map(|vars| vars.iter().map(|&v| grads.wrt(v)).collect())
        .collect();

    // Central differences on a spread of parameters across all groups.
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    for (gi, g) in ALL_GROUPS.iter().enumerate() {
        let base = flatten_group(&scene, *g);
        let stride = (base.len() / 2).max(1);
        for pi in (0..base.len()).step_by(stride).take(2) {
            let h = 1e-5 * base[pi].abs().max(1.0);
            let mut probe = base.clone();
            probe[pi] = base[pi] + h;
            let mut s = scene.clone();
            crate::trainer::write_group(&mut s, *g, &probe);
            let fp = loss_of(&s)?;
            probe[pi] = base[pi] - h;
            crate::trainer::write_group(&mut s, *g, &probe);
            let fm = loss_of(&s)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[gi][pi];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            probes += 1;
        }
    }
    Ok((
        worst < 1e-4,
        format!("max rel err {worst:.2e} over {probes} probed parameters"),
    ))
}

fn check_metrics() -> (bool, String) {
    let img = ImageRgb {
        width: 16,
        height: 13,
        data: (0..16 * 13)
            .map(|i| {
                let v = (i as f64 * 0.611).sin() * 0.5 + 0.5;
                [v, 1.0 - v, v * v]
            })
            .collect(),
    };
    let p = psnr(&img, &img).unwrap_or(f64::NAN);
    let s = ssim(&img, &img).unwrap_or(f64::NAN);
    (
        p == 99.0 && s == 1.0,
        format!("psnr(x,x) = {p}, ssim(x,x) = {s}"),
    )
}

// ---- bench ----------------------------------------------------------------

fn time_ms<F: FnMut()>(iters: usize, mut f: F) -> f64 {
    f(); // warmup
    let mut best = f64::INFINITY;
    for _ in 0..iters {
        let clock = Instant::now();
        f();
        best = best.min(clock.elapsed().as_secs_f64() * 1e3);
    }
    best
}

fn cmd_bench() -> Result<i32> {
    let spec = SyntheticSpec {
        frames: 8,
        resolution: 64,
        ..SyntheticSpec::new(SceneKind::MovingMirror)
    };
    let scene = crate::synth::build_scene(&spec)?;
    let camera = spec.camera_of(2);
    let t = spec.time_of(2);
    let rs = RenderSettings::default();
    let ts = TraceSettings::for_scene_diagonal(scene.bbox_diag());

    let (main, env) = deform_scene(&scene, t)?;
    let buffers = render_parallel(&main, &camera, &rs)?;
    let bvh = build_bvh(&env, &ts);
    let mut origins = Vec::new();
    let mut dirs = Vec::new();
    for i in 0..buffers.alpha.len() {
        if buffers.alpha[i] > rs.alpha_mask_threshold {
            let ray = camera.ray_through(
                (i % buffers.width) as f64 + 0.5,
                (i / buffers.width) as f64 + 0.5,
            );
            let p = ray.origin + ray.dir.scale(buffers.depth[i]);
            let d = reflect(ray.dir, buffers.normal[i]);
            origins.push(p + d.scale(ts.self_offset));
            dirs.push(d);
        }
    }

    println!("stage,ms");
    let ms = time_ms(5, || {
        deform_scene(&scene, t).unwrap();
    });
    println!("deform,{ms:.3}");
    let ms = time_ms(5, || {
        render_parallel(&main, &camera, &rs).unwrap();
    });
    println!("rasterize,{ms:.3}");
    let ms = time_ms(5, || {
        build_bvh(&env, &ts);
    });
    println!("bvh_build,{ms:.3}");
    let ms = time_ms(5, || {
        trace_specular_parallel(&origins, &dirs, &env, &bvh, &ts).unwrap();
    });
    println!("trace_specular,{ms:.3}");
    let hybrid_ms = time_ms(3, || {
        render_hybrid(&scene, t, &camera, &rs, &ts).unwrap();
    });
    println!("hybrid_frame,{hybrid_ms:.3}");

    // Per-step cost measured inside the trainer loop itself, on a small
    // in-memory dataset rendered from the same scene.
    let train_camera_spec = SyntheticSpec {
        resolution: 32,
        ..spec.clone()
    };
    let frames: Vec<crate::scene::Frame> = (0..3)
        .map(|i| {
            let cam = train_camera_spec.camera_of(i);
            let time = train_camera_spec.time_of(i);
            let out = render_hybrid(&scene, time, &cam, &rs, &ts)?;
            Ok(crate::scene::Frame {
                camera: cam,
                image: out.image,
                normal_map: None,
                name: format!("bench_{i:02}"),
            })
        })
        .collect::<Result<_>>()?;
    let dataset = crate::scene::Dataset {
        frames,
        background: [0.0; 3],
        scene_path: None,
        points_path: None,
    };
    let mut config = TrainConfig::new(3);
    config.trace = ts.clone();
    config.disable_specular = true;
    let diffuse = train(&dataset, scene.clone(), &config)?;
    let mean = |rows: &[crate::trainer::TrainLogRow]| {
        rows.iter().map(|r| r.wall_ms).sum::<f64>() / rows.len().max(1) as f64
    };
    println!("train_step_diffuse,{:.3}", mean(&diffuse.log));
    let mut config = TrainConfig::new(3);
    config.trace = ts.clone();
    config.schedule.diffuse_end = 0.01;
    config.schedule.specular_end = 0.02;
    let joint = train(&dataset, scene.clone(), &config)?;
    let joint_rows: Vec<_> = joint
        .log
        .into_iter()
        .filter(|r| r.phase == Phase::Joint)
        .collect();
    println!("train_step_joint,{:.3}", mean(&joint_rows));

    println!();
    println!(
        "hybrid frame: {hybrid_ms:.1} ms at {}x{} -> {:.2} frames/s",
        camera.width,
        camera.height,
        1e3 / hybrid_ms
    );
    Ok(0)
}
