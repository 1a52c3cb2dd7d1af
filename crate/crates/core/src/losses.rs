//! Training objectives: mean-absolute photometric error, structural
//! similarity, normal consistency against depth-derived pseudo normals,
//! temporally-consistent normal supervision against stored maps, and the
//! weighted total with its per-term report.

use crate::autodiff::Real;
use crate::image::{ImageRgb, NormalMap};
use crate::math::Vec3;
use crate::rasterizer::{pseudo_normals_from_depth, Buffers};
use crate::scene::Camera;
use crate::trainer::Phase;
use crate::{Error, Result};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_norm: f64,
    pub lambda_tcnorm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ssim: 0.2,
            lambda_norm: 0.05,
            lambda_tcnorm: 0.05,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_norm", self.lambda_norm),
            ("lambda_tcnorm", self.lambda_tcnorm),
        ] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("{} must be non-negative, got {}", name, w)));
            }
        }
        Ok(())
    }
}

/// Scalar values of every term, recorded once per training step.
/// `total` always equals the weighted sum of the other terms.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossReport {
    pub total: f64,
    pub photometric: f64,
    pub ssim_term: f64,
    pub l_norm: f64,
    pub l_tcnorm: f64,
    pub n_pixels: usize,
    pub n_norm_pixels: usize,
    pub n_tc_pixels: usize,
}

/// Mean absolute error over pixels and channels.
pub fn photometric<T: Real>(pred: &[[T; 3]], gt: &ImageRgb) -> Result<T> {
    if pred.len() != gt.data.len() {
        return Err(Error::Dimension {
            msg: format!("{} predicted pixels for {} ground-truth", pred.len(), gt.data.len()),
        });
    }
    let mut acc = T::lit(0.0);
    for (p, g) in pred.iter().zip(&gt.data) {
        for ch in 0..3 {
            acc = acc + p[ch].shift(-g[ch]).abs();
        }
    }
    Ok(acc.scale(1.0 / (3 * pred.len().max(1)) as f64))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Structural similarity with an 11-tap Gaussian window (sigma 1.5),
/// C1 = 0.01^2, C2 = 0.03^2, averaged over all fully-interior windows and
/// the three channels. Needs at least an 11x11 image.
pub fn ssim<T: Real>(pred: &[[T; 3]], gt: &ImageRgb) -> Result<T> {
    let (w, h) = (gt.width, gt.height);
    if pred.len() != w * h {
        return Err(Error::Dimension {
            msg: format!("{} predicted pixels for {}x{}", pred.len(), w, h),
        });
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Dimension {
            msg: format!("{}x{} too small for an 11-tap window", w, h),
        });
    }
    let k = gaussian_kernel();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut acc = T::lit(0.0);
    for ch in 0..3 {
        // Per-pixel products first so each records a single tape node.
        let x: Vec<T> = pred.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = gt.data.iter().map(|p| p[ch]).collect();
        let x2: Vec<T> = x.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = x.iter().zip(&y).map(|(&v, &g)| v.scale(g)).collect();
        let y2: Vec<f64> = y.iter().map(|&v| v * v).collect();

        let blur_t = |src: &[T]| -> Vec<T> {
            let mut horiz = Vec::with_capacity(ow * h);
            for row in 0..h {
                for x0 in 0..ow {
                    let mut s = T::lit(0.0);
                    for (i, &ki) in k.iter().enumerate() {
                        s = s + src[row * w + x0 + i].scale(ki);
                    }
                    horiz.push(s);
                }
            }
            let mut out = Vec::with_capacity(ow * oh);
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let mut s = T::lit(0.0);
                    for (j, &kj) in k.iter().enumerate() {
                        s = s + horiz[(y0 + j) * ow + x0].scale(kj);
                    }
                    out.push(s);
                }
            }
            out
        };
        let blur_f = |src: &[f64]| -> Vec<f64> {
            let mut horiz = Vec::with_capacity(ow * h);
            for row in 0..h {
                for x0 in 0..ow {
                    let mut s = 0.0;
                    for (i, &ki) in k.iter().enumerate() {
                        s = s + src[row * w + x0 + i] * ki;
                    }
                    horiz.push(s);
                }
            }
            let mut out = Vec::with_capacity(ow * oh);
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let mut s = 0.0;
                    for (j, &kj) in k.iter().enumerate() {
                        s = s + horiz[(y0 + j) * ow + x0] * kj;
                    }
                    out.push(s);
                }
            }
            out
        };

        let mu_x = blur_t(&x);
        let e_x2 = blur_t(&x2);
        let e_xy = blur_t(&xy);
        let mu_y = blur_f(&y);
        let e_y2 = blur_f(&y2);

        for i in 0..ow * oh {
            let mx = mu_x[i];
            let my = mu_y[i];
            let var_x = e_x2[i] - mx * mx;
            let var_y = e_y2[i] - my * my;
            let cov = e_xy[i] - mx.scale(my);
            let num = (mx.scale(2.0 * my).shift(SSIM_C1)) * (cov.scale(2.0).shift(SSIM_C2));
            let den = (mx * mx).shift(my * my + SSIM_C1) * var_x.shift(var_y + SSIM_C2);
            acc = acc + num / den;
        }
    }
    Ok(acc.scale(1.0 / (3 * ow * oh) as f64))
}

/// Mean of (1 - rendered . target) over masked pixels; zero on an empty
/// mask. Both inputs are expected unit-length where the mask is set.
fn masked_normal_loss<T: Real>(
    rendered: &[Vec3<T>],
    target: impl Fn(usize) -> Vec3<T>,
    mask: impl Fn(usize) -> bool,
) -> (T, usize) {
    let mut acc = T::lit(0.0);
    let mut count = 0;
    for (i, n) in rendered.iter().enumerate() {
        if !mask(i) {
            continue;
        }
        acc = acc + n.dot(target(i)).scale(-1.0).shift(1.0);
        count += 1;
    }
    if count == 0 {
        (T::lit(0.0), 0)
    } else {
        (acc.scale(1.0 / count as f64), count)
    }
}

/// Alignment of the rendered normal map with the pseudo normals derived
/// from rendered depth.
pub fn normal_consistency<T: Real>(
    rendered: &[Vec3<T>],
    pseudo: &[Vec3<T>],
    pseudo_valid: &[bool],
    mask: &[bool],
) -> Result<(T, usize)> {
    if rendered.len() != pseudo.len() || rendered.len() != mask.len() {
        return Err(Error::Dimension {
            msg: "normal consistency buffers disagree in size".into(),
        });
    }
    Ok(masked_normal_loss(
        rendered,
        |i| pseudo[i],
        |i| mask[i] && pseudo_valid[i],
    ))
}

/// Alignment of the rendered normal map with externally supplied normals
/// (the temporal-consistency supervision signal).
pub fn tc_normal<T: Real>(
    rendered: &[Vec3<T>],
    external: &NormalMap,
    mask: &[bool],
) -> Result<(T, usize)> {
    if rendered.len() != external.dirs.len() || rendered.len() != mask.len() {
        return Err(Error::Dimension {
            msg: "external normal map size disagrees with render".into(),
        });
    }
    Ok(masked_normal_loss(
        rendered,
        |i| Vec3::from_f64(Vec3::from_array(external.dirs[i])),
        |i| mask[i] && external.valid[i],
    ))
}

/// Phase-gated weighted objective. Phase 1 supervises the diffuse image;
/// later phases supervise the blended hybrid image, which the caller must
/// then provide. Normal terms apply in every phase, only over pixels whose
/// accumulated alpha clears `alpha_mask_threshold`; the temporal term also
/// requires the external map and its per-pixel validity.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    buffers: &Buffers<T>,
    hybrid: Option<&[[T; 3]]>,
    camera: &Camera,
    gt: &ImageRgb,
    external: Option<&NormalMap>,
    weights: &LossWeights,
    phase: Phase,
    alpha_mask_threshold: f64,
) -> Result<(T, LossReport)> {
    weights.check()?;
    if gt.width != buffers.width || gt.height != buffers.height {
        return Err(Error::Dimension {
            msg: format!(
                "ground truth {}x{} against render {}x{}",
                gt.width, gt.height, buffers.width, buffers.height
            ),
        });
    }
    let supervised: &[[T; 3]] = match phase {
        Phase::Diffuse => &buffers.diffuse,
        Phase::Specular | Phase::Joint => hybrid.ok_or_else(|| {
            Error::Config("specular and joint phases supervise the hybrid image".into())
        })?,
    };
    let photo = photometric(supervised, gt)?;
    let ssim_val = ssim(supervised, gt)?;
    let ssim_term = ssim_val.scale(-0.5).shift(0.5);
    let mask: Vec<bool> = buffers
        .alpha
        .iter()
        .map(|a| a.value() > alpha_mask_threshold)
        .collect();
    let pseudo = pseudo_normals_from_depth(&buffers.depth, camera)?;
    let (l_norm, n_norm) =
        normal_consistency(&buffers.normal, &pseudo.dirs, &pseudo.valid, &mask)?;
    let (l_tc, n_tc) = match external {
        Some(map) => tc_normal(&buffers.normal, map, &mask)?,
        None => (T::lit(0.0), 0),
    };
    let total = photo
        + ssim_term.scale(weights.lambda_ssim)
        + l_norm.scale(weights.lambda_norm)
        + l_tc.scale(weights.lambda_tcnorm);
    let report = LossReport {
        total: total.value(),
        photometric: photo.value(),
        ssim_term: ssim_term.value(),
        l_norm: l_norm.value(),
        l_tcnorm: l_tc.value(),
        n_pixels: gt.data.len(),
        n_norm_pixels: n_norm,
        n_tc_pixels: n_tc,
    };
    Ok((total, report))
}
