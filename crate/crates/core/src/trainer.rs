//! Coarse-to-fine optimization driver: the three-phase schedule, parameter
//! grouping with per-group freezing and learning rates, adaptive-moment
//! updates, opacity pruning, CSV logging, and checkpointing.
//!
//! Parameter flattening orders are fixed and shared by the gradient path,
//! the optimizer, and pruning:
//! per main splat, position (x,y,z) / rotation (w,x,y,z) / log-scale (2) /
//! opacity / SH channel-major / tint, each in its own group; all env-splat
//! parameters form one group, per splat center(3) rotation(4) scale(2)
//! opacity(1) SH channel-major; field groups walk layers in order, weights
//! row-major then biases.

use std::fmt;
use std::fs;
use std::io::Write as IoWrite;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::autodiff::{Real, Tape, Var};
use crate::deform::{deform_splats, DeformationField, FieldParams, ENV_OUT_DIM, MAIN_OUT_DIM};
use crate::env_tracer::TraceSettings;
use crate::hybrid::render_hybrid_buffers;
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::rasterizer::{render, RenderSettings};
use crate::scene::{
    init_env_sphere, init_from_points, load_points, save_scene, Dataset, InitConfig, Scene,
};
use crate::splat_math::{sh_coeff_count, RawSplat};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Diffuse,
    Specular,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Diffuse => "diffuse",
            Phase::Specular => "specular",
            Phase::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug)]
pub struct PhaseSchedule {
    pub total_steps: usize,
    /// Fraction of steps spent in the diffuse-only phase.
    pub diffuse_end: f64,
    /// Fraction at which the specular-only phase ends and joint begins.
    pub specular_end: f64,
}

impl PhaseSchedule {
    pub fn new(total_steps: usize) -> Self {
        PhaseSchedule {
            total_steps,
            diffuse_end: 0.15,
            specular_end: 0.25,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.diffuse_end > 0.0 && self.diffuse_end < self.specular_end && self.specular_end < 1.0)
        {
            return Err(Error::Config(format!(
                "phase fractions must satisfy 0 < diffuse {} < specular {} < 1",
                self.diffuse_end, self.specular_end
            )));
        }
        Ok(())
    }

    /// First step of the specular phase.
    pub fn diffuse_end_step(&self) -> usize {
        (self.total_steps as f64 * self.diffuse_end).ceil() as usize
    }

    /// First step of the joint phase.
    pub fn specular_end_step(&self) -> usize {
        (self.total_steps as f64 * self.specular_end).ceil() as usize
    }

    pub fn phase_of(&self, step: usize) -> Phase {
        if step < self.diffuse_end_step() {
            Phase::Diffuse
        } else if step < self.specular_end_step() {
            Phase::Specular
        } else {
            Phase::Joint
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    MainPos,
    MainRot,
    MainScale,
    MainOpacity,
    MainSh,
    MainTint,
    Env,
    FieldMain,
    FieldEnv,
}

pub const ALL_GROUPS: [ParamGroup; 9] = [
    ParamGroup::MainPos,
    ParamGroup::MainRot,
    ParamGroup::MainScale,
    ParamGroup::MainOpacity,
    ParamGroup::MainSh,
    ParamGroup::MainTint,
    ParamGroup::Env,
    ParamGroup::FieldMain,
    ParamGroup::FieldEnv,
];

impl ParamGroup {
    fn index(self) -> usize {
        ALL_GROUPS.iter().position(|&g| g == self).unwrap()
    }
}

/// The groups the given phase optimizes. Phase 1 trains main content and
/// its field but leaves the specular blend weight frozen unless
/// `tint_in_diffuse` overrides that; Phase 2 freezes main geometry and
/// trains the environment, its field, and the tint; Phase 3 trains all.
pub fn trainable_groups(phase: Phase, tint_in_diffuse: bool) -> Vec<ParamGroup> {
    match phase {
        Phase::Diffuse => {
            let mut g = vec![
                ParamGroup::MainPos,
                ParamGroup::MainRot,
                ParamGroup::MainScale,
                ParamGroup::MainOpacity,
                ParamGroup::MainSh,
                ParamGroup::FieldMain,
            ];
            if tint_in_diffuse {
                g.push(ParamGroup::MainTint);
            }
            g
        }
        Phase::Specular => vec![ParamGroup::MainTint, ParamGroup::Env, ParamGroup::FieldEnv],
        Phase::Joint => ALL_GROUPS.to_vec(),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub main_pos: f64,
    pub main_rot: f64,
    pub main_scale: f64,
    pub main_opacity: f64,
    pub main_sh: f64,
    pub main_tint: f64,
    pub env: f64,
    pub field_main: f64,
    pub field_env: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            main_pos: 2e-3,
            main_rot: 2e-3,
            main_scale: 5e-3,
            main_opacity: 5e-2,
            main_sh: 5e-3,
            main_tint: 2.5e-2,
            env: 5e-3,
            field_main: 1e-3,
            field_env: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::MainPos => self.main_pos,
            ParamGroup::MainRot => self.main_rot,
            ParamGroup::MainScale => self.main_scale,
            ParamGroup::MainOpacity => self.main_opacity,
            ParamGroup::MainSh => self.main_sh,
            ParamGroup::MainTint => self.main_tint,
            ParamGroup::Env => self.env,
            ParamGroup::FieldMain => self.field_main,
            ParamGroup::FieldEnv => self.field_env,
        }
    }

    fn check(&self) -> Result<()> {
        for g in ALL_GROUPS {
            if !(self.of(g) > 0.0) {
                return Err(Error::Config(format!("learning rate for {:?} must be positive", g)));
            }
        }
        Ok(())
    }
}

/// First/second moment accumulators for one parameter group, plus the
/// group's own bias-correction step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

/// One adaptive-moment update on a flat parameter group. Lazily sizes the
/// state on first use; later calls must keep the same length.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            msg: format!("{} params for {} gradients", params.len(), grads.len()),
        });
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    if state.m.len() != params.len() {
        return Err(Error::Dimension {
            msg: format!(
                "optimizer state holds {} rows for {} params",
                state.m.len(),
                params.len()
            ),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= rate * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn env_stride(coeffs: usize) -> usize {
    3 + 4 + 2 + 1 + 3 * coeffs
}

/// Canonical parameters of one group, in the module-level flattening order.
pub fn flatten_group(scene: &Scene, g: ParamGroup) -> Vec<f64> {
    let coeffs = sh_coeff_count(scene.sh_degree);
    match g {
        ParamGroup::MainPos => scene.main.iter().flat_map(|s| s.center).collect(),
        ParamGroup::MainRot => scene.main.iter().flat_map(|s| s.rotation).collect(),
        ParamGroup::MainScale => scene.main.iter().flat_map(|s| s.log_scale).collect(),
        ParamGroup::MainOpacity => scene.main.iter().map(|s| s.opacity_logit).collect(),
        ParamGroup::MainSh => scene
            .main
            .iter()
            .flat_map(|s| s.sh_coeffs.iter().flatten().copied())
            .collect(),
        ParamGroup::MainTint => scene.main.iter().map(|s| s.tint_logit).collect(),
        ParamGroup::Env => {
            let mut out = Vec::with_capacity(scene.env.len() * env_stride(coeffs));
            for s in &scene.env {
                out.extend_from_slice(&s.center);
                out.extend_from_slice(&s.rotation);
                out.extend_from_slice(&s.log_scale);
                out.push(s.opacity_logit);
                for ch in &s.sh_coeffs {
                    out.extend_from_slice(ch);
                }
            }
            out
        }
        ParamGroup::FieldMain => flatten_field(&scene.deform_main),
        ParamGroup::FieldEnv => flatten_field(&scene.deform_env),
    }
}

fn flatten_field(f: &DeformationField) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &f.layers {
        out.extend_from_slice(&l.w);
        out.extend_from_slice(&l.b);
    }
    out
}

/// Writes a flat group back into the scene; exact inverse of
/// [`flatten_group`] for matching lengths.
pub fn write_group(scene: &mut Scene, g: ParamGroup, vals: &[f64]) {
    let coeffs = sh_coeff_count(scene.sh_degree);
    match g {
        ParamGroup::MainPos => {
            for (s, c) in scene.main.iter_mut().zip(vals.chunks_exact(3)) {
                s.center.copy_from_slice(c);
            }
        }
        ParamGroup::MainRot => {
            for (s, c) in scene.main.iter_mut().zip(vals.chunks_exact(4)) {
                s.rotation.copy_from_slice(c);
            }
        }
        ParamGroup::MainScale => {
            for (s, c) in scene.main.iter_mut().zip(vals.chunks_exact(2)) {
                s.log_scale.copy_from_slice(c);
            }
        }
        ParamGroup::MainOpacity => {
            for (s, &v) in scene.main.iter_mut().zip(vals) {
                s.opacity_logit = v;
            }
        }
        ParamGroup::MainSh => {
            for (s, c) in scene.main.iter_mut().zip(vals.chunks_exact(3 * coeffs)) {
                for ch in 0..3 {
                    s.sh_coeffs[ch].copy_from_slice(&c[ch * coeffs..(ch + 1) * coeffs]);
                }
            }
        }
        ParamGroup::MainTint => {
            for (s, &v) in scene.main.iter_mut().zip(vals) {
                s.tint_logit = v;
            }
        }
        ParamGroup::Env => {
            for (s, c) in scene.env.iter_mut().zip(vals.chunks_exact(env_stride(coeffs))) {
                s.center.copy_from_slice(&c[0..3]);
                s.rotation.copy_from_slice(&c[3..7]);
                s.log_scale.copy_from_slice(&c[7..9]);
                s.opacity_logit = c[9];
                for ch in 0..3 {
                    s.sh_coeffs[ch].copy_from_slice(&c[10 + ch * coeffs..10 + (ch + 1) * coeffs]);
                }
            }
        }
        ParamGroup::FieldMain => write_field(&mut scene.deform_main, vals),
        ParamGroup::FieldEnv => write_field(&mut scene.deform_env, vals),
    }
}

fn write_field(f: &mut DeformationField, vals: &[f64]) {
    let mut off = 0;
    for l in &mut f.layers {
        let nw = l.w.len();
        l.w.copy_from_slice(&vals[off..off + nw]);
        off += nw;
        let nb = l.b.len();
        l.b.copy_from_slice(&vals[off..off + nb]);
        off += nb;
    }
}

/// Scene parameters placed on a tape: trainable groups become leaf
/// variables (recorded in `group_vars` in flatten order), frozen groups
/// enter as constants and record nothing.
pub struct LiftedScene<'t> {
    pub main: Vec<RawSplat<Var<'t>>>,
    pub env: Vec<RawSplat<Var<'t>>>,
    pub field_main: FieldParams<Var<'t>>,
    pub field_env: FieldParams<Var<'t>>,
    /// Leaf variables per group, empty when the group entered as constants.
    pub group_vars: Vec<Vec<Var<'t>>>,
}

pub fn lift_scene<'t>(tape: &'t Tape, scene: &Scene, trainable: &[ParamGroup]) -> LiftedScene<'t> {
    let coeffs = sh_coeff_count(scene.sh_degree);
    let mut group_vars: Vec<Vec<Var<'t>>> = vec![Vec::new(); ALL_GROUPS.len()];
    let mut lifted: Vec<Vec<Var<'t>>> = Vec::with_capacity(ALL_GROUPS.len());
    for g in ALL_GROUPS {
        let flat = flatten_group(scene, g);
        let vars: Vec<Var<'t>> = if trainable.contains(&g) {
            flat.iter().map(|&v| tape.var(v)).collect()
        } else {
            flat.iter().map(|&v| <Var<'t> as Real>::lit(v)).collect()
        };
        if trainable.contains(&g) {
            group_vars[g.index()] = vars.clone();
        }
        lifted.push(vars);
    }
    let pos = &lifted[ParamGroup::MainPos.index()];
    let rot = &lifted[ParamGroup::MainRot.index()];
    let scale = &lifted[ParamGroup::MainScale.index()];
    let opacity = &lifted[ParamGroup::MainOpacity.index()];
    let sh = &lifted[ParamGroup::MainSh.index()];
    let tint = &lifted[ParamGroup::MainTint.index()];
    let main = (0..scene.main.len())
        .map(|i| RawSplat {
            center: crate::math::Vec3::new(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]),
            rotation: crate::math::Quat::new(
                rot[4 * i],
                rot[4 * i + 1],
                rot[4 * i + 2],
                rot[4 * i + 3],
            ),
            log_scale: [scale[2 * i], scale[2 * i + 1]],
            opacity_logit: opacity[i],
            tint_logit: Some(tint[i]),
            sh: (0..coeffs)
                .map(|c| {
                    [
                        sh[i * 3 * coeffs + c],
                        sh[i * 3 * coeffs + coeffs + c],
                        sh[i * 3 * coeffs + 2 * coeffs + c],
                    ]
                })
                .collect(),
        })
        .collect();
    let ev = &lifted[ParamGroup::Env.index()];
    let stride = env_stride(coeffs);
    let env = (0..scene.env.len())
        .map(|i| {
            let c = &ev[i * stride..(i + 1) * stride];
            RawSplat {
                center: crate::math::Vec3::new(c[0], c[1], c[2]),
                rotation: crate::math::Quat::new(c[3], c[4], c[5], c[6]),
                log_scale: [c[7], c[8]],
                opacity_logit: c[9],
                tint_logit: None,
                sh: (0..coeffs)
                    .map(|k| [c[10 + k], c[10 + coeffs + k], c[10 + 2 * coeffs + k]])
                    .collect(),
            }
        })
        .collect();
    let field_main = lift_field(&scene.deform_main, &lifted[ParamGroup::FieldMain.index()]);
    let field_env = lift_field(&scene.deform_env, &lifted[ParamGroup::FieldEnv.index()]);
    LiftedScene {
        main,
        env,
        field_main,
        field_env,
        group_vars,
    }
}

fn lift_field<'t>(f: &DeformationField, flat: &[Var<'t>]) -> FieldParams<Var<'t>> {
    let mut off = 0;
    let layers = f
        .layers
        .iter()
        .map(|l| {
            let w = flat[off..off + l.w.len()].to_vec();
            off += l.w.len();
            let b = flat[off..off + l.b.len()].to_vec();
            off += l.b.len();
            (w, b)
        })
        .collect();
    FieldParams { layers }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Keep-masks for both splat sets under an opacity threshold: a splat
/// survives when sigmoid(opacity_logit) >= threshold. Each set keeps at
/// least `min_count` splats, preferring the most opaque, and survivors
/// keep their relative order.
pub fn prune_masks(scene: &Scene, threshold: f64, min_count: usize) -> (Vec<bool>, Vec<bool>) {
    let mask_of = |logits: Vec<f64>| -> Vec<bool> {
        let mut keep: Vec<bool> = logits.iter().map(|&l| sigmoid(l) >= threshold).collect();
        let kept = keep.iter().filter(|&&k| k).count();
        if kept < min_count && logits.len() > kept {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            for &i in order.iter().take(min_count.min(logits.len())) {
                keep[i] = true;
            }
        }
        keep
    };
    (
        mask_of(scene.main.iter().map(|s| s.opacity_logit).collect()),
        mask_of(scene.env.iter().map(|s| s.opacity_logit).collect()),
    )
}

/// Removes low-opacity splats from the scene, never dropping a set below
/// `min_count`.
pub fn prune(scene: &Scene, threshold: f64, min_count: usize) -> Scene {
    let (keep_main, keep_env) = prune_masks(scene, threshold, min_count);
    let mut out = scene.clone();
    apply_prune(&mut out, &keep_main, &keep_env);
    out
}

fn apply_prune(scene: &mut Scene, keep_main: &[bool], keep_env: &[bool]) {
    let mut it = keep_main.iter();
    scene.main.retain(|_| *it.next().unwrap());
    let mut it = keep_env.iter();
    scene.env.retain(|_| *it.next().unwrap());
}

fn retain_chunks(data: &mut Vec<f64>, chunk: usize, keep: &[bool]) {
    if data.is_empty() {
        return;
    }
    debug_assert_eq!(data.len(), chunk * keep.len());
    let mut out = Vec::with_capacity(data.len());
    for (i, &k) in keep.iter().enumerate() {
        if k {
            out.extend_from_slice(&data[i * chunk..(i + 1) * chunk]);
        }
    }
    *data = out;
}

fn prune_adam_rows(states: &mut [AdamState], coeffs: usize, keep_main: &[bool], keep_env: &[bool]) {
    let main_chunks = [
        (ParamGroup::MainPos, 3),
        (ParamGroup::MainRot, 4),
        (ParamGroup::MainScale, 2),
        (ParamGroup::MainOpacity, 1),
        (ParamGroup::MainSh, 3 * coeffs),
        (ParamGroup::MainTint, 1),
    ];
    for (g, chunk) in main_chunks {
        let s = &mut states[g.index()];
        retain_chunks(&mut s.m, chunk, keep_main);
        retain_chunks(&mut s.v, chunk, keep_main);
    }
    let s = &mut states[ParamGroup::Env.index()];
    retain_chunks(&mut s.m, env_stride(coeffs), keep_env);
    retain_chunks(&mut s.v, env_stride(coeffs), keep_env);
}

/// Knobs for building a fresh trainable scene from a dataset's point cloud.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneInit {
    pub sh_degree: usize,
    /// Environment splats seeded on a shell around the content.
    pub n_env: usize,
    /// Inner shell radius; 0 picks 2x the content diagonal.
    pub env_radius: f64,
    pub hidden: Vec<usize>,
    pub l_pos: usize,
    pub l_time: usize,
    pub seed: u64,
}

impl Default for SceneInit {
    fn default() -> Self {
        SceneInit {
            sh_degree: 1,
            n_env: 128,
            env_radius: 0.0,
            hidden: vec![16],
            l_pos: 2,
            l_time: 1,
            seed: 0,
        }
    }
}

/// Main splats from the dataset's point cloud, env splats on a surrounding
/// shell, and freshly seeded deformation fields.
pub fn init_scene(dataset: &Dataset, init: &SceneInit) -> Result<Scene> {
    let points_path = dataset.points_path.as_ref().ok_or_else(|| {
        Error::Config("dataset manifest lists no point cloud to initialize from".into())
    })?;
    let cloud = load_points(points_path)?;
    let main = init_from_points(
        &cloud.points,
        &cloud.colors,
        &InitConfig {
            sh_degree: init.sh_degree,
            ..InitConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let mut scene = Scene {
        sh_degree: init.sh_degree,
        main,
        env: Vec::new(),
        deform_main: DeformationField::new(init.l_pos, init.l_time, &init.hidden, MAIN_OUT_DIM, &mut rng),
        deform_env: DeformationField::new(init.l_pos, init.l_time, &init.hidden, ENV_OUT_DIM, &mut rng),
    };
    let (lo, hi) = scene.bbox_main();
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let radius = if init.env_radius > 0.0 {
        init.env_radius
    } else {
        2.0 * scene.bbox_diag().max(1e-3)
    };
    scene.env = init_env_sphere(center, radius, init.n_env, 0.5, [0.5; 3], init.sh_degree);
    Ok(scene)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub schedule: PhaseSchedule,
    pub rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Splats below this canonical opacity get pruned; 0 disables.
    pub prune_threshold: f64,
    pub prune_interval: usize,
    pub prune_min_count: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub render: RenderSettings,
    pub trace: TraceSettings,
    /// Lets Phase 1 train the specular blend weight too.
    pub tint_trainable_in_diffuse: bool,
    /// Ablation switch: stay in the diffuse phase for the whole run, so the
    /// specular branch is never rendered and never trained.
    pub disable_specular: bool,
    /// Checkpoints and the CSV log land here; `None` keeps training
    /// entirely in memory.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(total_steps: usize) -> Self {
        TrainConfig {
            schedule: PhaseSchedule::new(total_steps),
            rates: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            prune_threshold: 0.005,
            prune_interval: 500,
            prune_min_count: 8,
            checkpoint_interval: 1000,
            seed: 0,
            weights: LossWeights::default(),
            render: RenderSettings::default(),
            trace: TraceSettings::default(),
            tint_trainable_in_diffuse: false,
            disable_specular: false,
            out_dir: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.schedule.check()?;
        self.rates.check()?;
        self.weights.check()?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{} must lie in (0, 1), got {}", name, b)));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.prune_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::Config(format!(
                "prune threshold {} outside [0, 1)",
                self.prune_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub step: usize,
    pub phase: Phase,
    pub report: LossReport,
    pub n_main: usize,
    pub n_env: usize,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub scene: Scene,
    pub log: Vec<TrainLogRow>,
}

fn renormalize_quats<'a>(rotations: impl Iterator<Item = &'a mut [f64; 4]>) {
    for q in rotations {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-12 {
            *q = [1.0, 0.0, 0.0, 0.0];
        } else {
            for v in q.iter_mut() {
                *v /= n;
            }
        }
    }
}

/// Runs the staged optimization. Per step: pick a frame, lift the phase's
/// trainable groups onto a fresh tape, deform to the frame's time, render
/// (diffuse-only in Phase 1, hybrid afterwards), evaluate the phase-gated
/// loss, backpropagate, update each trainable group, renormalize its
/// quaternions, and prune/checkpoint on schedule. The render background is
/// taken from the dataset so supervision and rendering composite onto the
/// same color. Deterministic for a fixed seed.
pub fn train(dataset: &Dataset, scene: Scene, config: &TrainConfig) -> Result<TrainOutcome> {
    config.check()?;
    if dataset.frames.is_empty() {
        return Err(Error::Config("dataset holds no frames".into()));
    }
    let mut scene = scene;
    let mut render_settings = config.render.clone();
    render_settings.background = dataset.background;
    let coeffs = sh_coeff_count(scene.sh_degree);
    let mut adam: Vec<AdamState> = vec![AdamState::default(); ALL_GROUPS.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.schedule.total_steps);
    let mut csv = match &config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
            let path = dir.join("train_log.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(
                f,
                "step,phase,total,photometric,ssim_term,l_norm,l_tcnorm,n_main,n_env,wall_ms"
            )
            .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    for step in 0..config.schedule.total_steps {
        let clock = Instant::now();
        let phase = if config.disable_specular {
            Phase::Diffuse
        } else {
            config.schedule.phase_of(step)
        };
        let frame_idx = rng.gen_range(0..dataset.frames.len());
        let frame = &dataset.frames[frame_idx];
        let trainable = trainable_groups(phase, config.tint_trainable_in_diffuse);

        let tape = Tape::new();
        let lifted = lift_scene(&tape, &scene, &trainable);
        let t = <Var<'_> as Real>::lit(frame.camera.time);
        let main = deform_splats(&lifted.main, &scene.deform_main, &lifted.field_main, t)?;
        let (total, report) = if phase == Phase::Diffuse {
            let buffers = render(&main, &frame.camera, &render_settings)?;
            total_loss(
                &buffers,
                None,
                &frame.camera,
                &frame.image,
                frame.normal_map.as_ref(),
                &config.weights,
                phase,
                render_settings.alpha_mask_threshold,
            )?
        } else {
            let env = deform_splats(&lifted.env, &scene.deform_env, &lifted.field_env, t)?;
            let hb = render_hybrid_buffers(&main, &env, &frame.camera, &render_settings, &config.trace)?;
            total_loss(
                &hb.raster,
                Some(&hb.final_color),
                &frame.camera,
                &frame.image,
                frame.normal_map.as_ref(),
                &config.weights,
                phase,
                render_settings.alpha_mask_threshold,
            )?
        };
        for (term, v) in [
            ("photometric", report.photometric),
            ("ssim_term", report.ssim_term),
            ("l_norm", report.l_norm),
            ("l_tcnorm", report.l_tcnorm),
            ("total", report.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    frame: frame_idx,
                    term,
                });
            }
        }
        let grads = tape.backward(total);
        for &g in &trainable {
            let vars = &lifted.group_vars[g.index()];
            if vars.is_empty() {
                continue;
            }
            let grad_vec: Vec<f64> = vars.iter().map(|&v| grads.wrt(v)).collect();
            let mut params = flatten_group(&scene, g);
            optimizer_step(
                &mut params,
                &grad_vec,
                &mut adam[g.index()],
                config.rates.of(g),
                config.beta1,
                config.beta2,
                config.eps,
            )?;
            write_group(&mut scene, g, &params);
            if g == ParamGroup::MainRot {
                renormalize_quats(scene.main.iter_mut().map(|s| &mut s.rotation));
            }
            if g == ParamGroup::Env {
                renormalize_quats(scene.env.iter_mut().map(|s| &mut s.rotation));
            }
        }

        if config.prune_threshold > 0.0 && (step + 1) % config.prune_interval == 0 {
            let (keep_main, keep_env) =
                prune_masks(&scene, config.prune_threshold, config.prune_min_count);
            if keep_main.iter().any(|&k| !k) || keep_env.iter().any(|&k| !k) {
                prune_adam_rows(&mut adam, coeffs, &keep_main, &keep_env);
                apply_prune(&mut scene, &keep_main, &keep_env);
            }
        }

        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        if let Some((f, path)) = &mut csv {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                step,
                phase,
                report.total,
                report.photometric,
                report.ssim_term,
                report.l_norm,
                report.l_tcnorm,
                scene.main.len(),
                scene.env.len(),
                wall_ms
            )
            .map_err(|e| Error::io(path.clone(), e))?;
        }
        if let Some(dir) = &config.out_dir {
            if (step + 1) % config.checkpoint_interval == 0 {
                let path = dir.join(format!("checkpoint_{:06}.json", step + 1));
                save_scene(&path, &scene)?;
            }
        }
        log.push(TrainLogRow {
            step,
            phase,
            report,
            n_main: scene.main.len(),
            n_env: scene.env.len(),
            wall_ms,
        });
    }
    Ok(TrainOutcome { scene, log })
}
