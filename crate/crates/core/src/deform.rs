//! Time-conditioned deformation fields: small MLPs that map a splat's
//! canonical center and a time in [0, 1] to residuals on the raw splat
//! parameters. Residuals are applied in raw space (before activation);
//! rotation updates are additive on the quaternion followed by
//! renormalization.
//!
//! The output head is zero-initialized, so a fresh field is exactly the
//! identity deformation.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matvec, Real};
use crate::math::{Quat, Vec3};
use crate::scene::Scene;
use crate::splat_math::{RawSplat, Surfel};
use crate::{Error, Result};

/// Residual output widths: main splats get a tint column, environment
/// splats do not.
pub const MAIN_OUT_DIM: usize = 11;
pub const ENV_OUT_DIM: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// On-disk form: weight blobs are base64 of little-endian f64s, shapes
/// declared alongside.
#[derive(Serialize, Deserialize)]
struct LayerRepr {
    rows: usize,
    cols: usize,
    w: String,
    b: String,
}

fn encode_f64s(vals: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(text: &str, expect: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64
        .decode(text)
        .map_err(|e| format!("{}: bad base64: {}", what, e))?;
    if bytes.len() != expect * 8 {
        return Err(format!(
            "{}: expected {} f64 values ({} bytes), got {} bytes",
            what,
            expect,
            expect * 8,
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        LayerRepr {
            rows: l.rows,
            cols: l.cols,
            w: encode_f64s(&l.w),
            b: encode_f64s(&l.b),
        }
    }
}

impl TryFrom<LayerRepr> for Layer {
    type Error = String;
    fn try_from(r: LayerRepr) -> std::result::Result<Self, String> {
        let w = decode_f64s(&r.w, r.rows * r.cols, "layer weights")?;
        let b = decode_f64s(&r.b, r.rows, "layer bias")?;
        Ok(Layer {
            rows: r.rows,
            cols: r.cols,
            w,
            b,
        })
    }
}

impl Serialize for Layer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LayerRepr::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Layer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = LayerRepr::deserialize(d)?;
        Layer::try_from(repr).map_err(serde::de::Error::custom)
    }
}

/// MLP over `[encode(p), encode(t)]` with relu hidden layers and a linear
/// head. `hidden` holds the hidden widths; `layers.len() == hidden.len() + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub l_pos: usize,
    pub l_time: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub layers: Vec<Layer>,
}

/// Feature layout of [`positional_encode`] applied to (p, t):
/// `3 * (2 * l_pos + 1)` position features followed by `2 * l_time + 1`
/// time features, each block ordered raw value first, then per octave
/// sin of every component, then cos.
pub fn pos_feature_count(l_pos: usize) -> usize {
    3 * (2 * l_pos + 1)
}

pub fn input_dim(l_pos: usize, l_time: usize) -> usize {
    pos_feature_count(l_pos) + 2 * l_time + 1
}

/// Index of the raw time feature.
pub fn time_raw_index(l_pos: usize) -> usize {
    pos_feature_count(l_pos)
}

/// Index of `sin(2^l * pi * t)`; requires `l < l_time`.
pub fn time_sin_index(l_pos: usize, l: usize) -> usize {
    pos_feature_count(l_pos) + 1 + 2 * l
}

/// Index of `cos(2^l * pi * t)`; requires `l < l_time`.
pub fn time_cos_index(l_pos: usize, l: usize) -> usize {
    pos_feature_count(l_pos) + 2 + 2 * l
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)]`
/// per component: raw values first, then octave by octave.
pub fn positional_encode<T: Real>(x: &[T], levels: usize, out: &mut Vec<T>) {
    out.extend_from_slice(x);
    for l in 0..levels {
        let freq = std::f64::consts::PI * (1u64 << l) as f64;
        for &v in x {
            out.push(v.scale(freq).sin());
        }
        for &v in x {
            out.push(v.scale(freq).cos());
        }
    }
}

impl DeformationField {
    /// Random hidden layers (Kaiming-uniform for relu), zero output head:
    /// the field starts as the identity deformation.
    pub fn new<R: Rng>(
        l_pos: usize,
        l_time: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut in_dim = input_dim(l_pos, l_time);
        for &h in hidden {
            let bound = (6.0 / in_dim as f64).sqrt();
            let w = (0..h * in_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Layer {
                rows: h,
                cols: in_dim,
                w,
                b: vec![0.0; h],
            });
            in_dim = h;
        }
        layers.push(Layer {
            rows: out_dim,
            cols: in_dim,
            w: vec![0.0; out_dim * in_dim],
            b: vec![0.0; out_dim],
        });
        DeformationField {
            l_pos,
            l_time,
            hidden: hidden.to_vec(),
            out_dim,
            layers,
        }
    }

    /// Exact linear readout of selected input features: each tap adds
    /// `coeff * feature` to one output. Built from relu pairs
    /// (`relu(f) - relu(-f) == f`), so the output is exact, not an
    /// approximation. Used to author ground-truth motions that the
    /// training architecture can represent.
    pub fn from_feature_taps(
        l_pos: usize,
        l_time: usize,
        out_dim: usize,
        taps: &[FeatureTap],
    ) -> Self {
        let in_dim = input_dim(l_pos, l_time);
        let h = 2 * taps.len().max(1);
        let mut l1 = Layer {
            rows: h,
            cols: in_dim,
            w: vec![0.0; h * in_dim],
            b: vec![0.0; h],
        };
        let mut l2 = Layer {
            rows: out_dim,
            cols: h,
            w: vec![0.0; out_dim * h],
            b: vec![0.0; out_dim],
        };
        for (i, tap) in taps.iter().enumerate() {
            assert!(tap.feature < in_dim && tap.out < out_dim);
            l1.w[(2 * i) * in_dim + tap.feature] = 1.0;
            l1.w[(2 * i + 1) * in_dim + tap.feature] = -1.0;
            l2.w[tap.out * h + 2 * i] = tap.coeff;
            l2.w[tap.out * h + 2 * i + 1] = -tap.coeff;
        }
        DeformationField {
            l_pos,
            l_time,
            hidden: vec![h],
            out_dim,
            layers: vec![l1, l2],
        }
    }

    pub fn input_dim(&self) -> usize {
        input_dim(self.l_pos, self.l_time)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Shape-chain check; scene loading calls this on both fields.
    pub fn validate(&self, what: &str) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Config(format!("deformation field {}: {}", what, msg)))
        };
        if self.layers.len() != self.hidden.len() + 1 {
            return fail(format!(
                "{} layers declared for {} hidden widths",
                self.layers.len(),
                self.hidden.len()
            ));
        }
        let mut in_dim = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.cols != in_dim {
                return fail(format!("layer {}: expected {} cols, has {}", i, in_dim, layer.cols));
            }
            let expect_rows = if i < self.hidden.len() {
                self.hidden[i]
            } else {
                self.out_dim
            };
            if layer.rows != expect_rows {
                return fail(format!("layer {}: expected {} rows, has {}", i, expect_rows, layer.rows));
            }
            if layer.w.len() != layer.rows * layer.cols || layer.b.len() != layer.rows {
                return fail(format!("layer {}: blob sizes disagree with shape", i));
            }
            if layer.w.iter().chain(&layer.b).any(|v| !v.is_finite()) {
                return fail(format!("layer {}: non-finite weight", i));
            }
            in_dim = layer.rows;
        }
        if self.out_dim != MAIN_OUT_DIM && self.out_dim != ENV_OUT_DIM {
            return fail(format!("unsupported out_dim {}", self.out_dim));
        }
        Ok(())
    }
}

/// Field weights as pipeline scalars. Layer order matches
/// `DeformationField::layers`; within a layer, weights row-major then bias.
/// The trainer leafs parameters in exactly this traversal order.
#[derive(Clone, Debug)]
pub struct FieldParams<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> FieldParams<T> {
    /// Lifts stored weights as constants (no gradient tracking).
    pub fn lift(f: &DeformationField) -> Self {
        FieldParams {
            layers: f
                .layers
                .iter()
                .map(|l| {
                    (
                        l.w.iter().map(|&v| T::lit(v)).collect(),
                        l.b.iter().map(|&v| T::lit(v)).collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Raw-space residuals for one splat at one time.
#[derive(Clone, Debug)]
pub struct Residual<T> {
    pub d_center: Vec3<T>,
    pub d_log_scale: [T; 2],
    /// (w, x, y, z), added to the canonical quaternion before renormalizing.
    pub d_rotation: [T; 4],
    pub d_opacity: T,
    /// Present only for main-splat fields (`out_dim == 11`).
    pub d_tint: Option<T>,
}

/// Runs the field at (p, t). Output columns are ordered
/// `[dp x3, d_log_scale x2, d_rot x4 (w,x,y,z), d_opacity, d_tint?]`.
pub fn eval_deform<T: Real>(
    field: &DeformationField,
    params: &FieldParams<T>,
    p: Vec3<T>,
    t: T,
) -> Result<Residual<T>> {
    let tv = t.value();
    if !(0.0..=1.0).contains(&tv) {
        return Err(Error::Domain {
            op: "eval_deform",
            msg: format!("time {} outside [0, 1]", tv),
        });
    }
    let mut feat = Vec::with_capacity(field.input_dim());
    positional_encode(&[p.x, p.y, p.z], field.l_pos, &mut feat);
    positional_encode(&[t], field.l_time, &mut feat);
    debug_assert_eq!(feat.len(), field.input_dim());

    let mut h = feat;
    let last = params.layers.len() - 1;
    for (i, ((w, b), shape)) in params.layers.iter().zip(&field.layers).enumerate() {
        h = matvec(w, shape.rows, shape.cols, &h, b);
        if i < last {
            for v in &mut h {
                *v = v.relu();
            }
        }
    }

    let d_tint = if field.out_dim == MAIN_OUT_DIM {
        Some(h[10])
    } else {
        None
    };
    Ok(Residual {
        d_center: Vec3::new(h[0], h[1], h[2]),
        d_log_scale: [h[3], h[4]],
        d_rotation: [h[5], h[6], h[7], h[8]],
        d_opacity: h[9],
        d_tint,
    })
}

/// Adds residuals in raw space. The rotation sum stays unnormalized so that
/// activation normalizes exactly once; a degenerate sum (norm under 1e-9 on
/// values) keeps the canonical rotation instead.
pub fn apply_residuals<T: Real>(raw: &RawSplat<T>, r: &Residual<T>) -> RawSplat<T> {
    let q = Quat::new(
        raw.rotation.w + r.d_rotation[0],
        raw.rotation.x + r.d_rotation[1],
        raw.rotation.y + r.d_rotation[2],
        raw.rotation.z + r.d_rotation[3],
    );
    let rotation = if q.norm().value() < 1e-9 { raw.rotation } else { q };
    let tint_logit = match (raw.tint_logit, &r.d_tint) {
        (Some(t), Some(dt)) => Some(t + *dt),
        (Some(t), None) => Some(t),
        (None, _) => None,
    };
    RawSplat {
        center: raw.center + r.d_center,
        rotation,
        log_scale: [
            raw.log_scale[0] + r.d_log_scale[0],
            raw.log_scale[1] + r.d_log_scale[1],
        ],
        opacity_logit: raw.opacity_logit + r.d_opacity,
        tint_logit,
        sh: raw.sh.clone(),
    }
}

/// One tap of [`DeformationField::from_feature_taps`].
#[derive(Clone, Copy, Debug)]
pub struct FeatureTap {
    pub out: usize,
    pub feature: usize,
    pub coeff: f64,
}

/// Deforms and activates a batch of raw splats at time `t`. The field's
/// center input is the canonical center.
pub fn deform_splats<T: Real>(
    raws: &[RawSplat<T>],
    field: &DeformationField,
    params: &FieldParams<T>,
    t: T,
) -> Result<Vec<Surfel<T>>> {
    raws.iter()
        .map(|raw| {
            let r = eval_deform(field, params, raw.center, t)?;
            Ok(apply_residuals(raw, &r).activate())
        })
        .collect()
}

/// Scene-level f64 convenience: both splat sets deformed to time `t`.
pub fn deform_scene(scene: &Scene, t: f64) -> Result<(Vec<Surfel<f64>>, Vec<Surfel<f64>>)> {
    let main_raw: Vec<RawSplat<f64>> = scene.main.iter().map(|s| s.to_raw()).collect();
    let env_raw: Vec<RawSplat<f64>> = scene.env.iter().map(|s| s.to_raw()).collect();
    let pm = FieldParams::<f64>::lift(&scene.deform_main);
    let pe = FieldParams::<f64>::lift(&scene.deform_env);
    let main = deform_splats(&main_raw, &scene.deform_main, &pm, t)?;
    let env = deform_splats(&env_raw, &scene.deform_env, &pe, t)?;
    Ok((main, env))
}
