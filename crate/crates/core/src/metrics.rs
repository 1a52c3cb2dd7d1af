//! Image-quality metrics and the directory-level evaluation harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::image::{load_rgb, ImageRgb, NormalMap};
use crate::math::Vec3f;
use crate::{Error, Result};

/// Reported PSNR never exceeds this, so identical images stay finite in
/// logs and CSVs.
pub const PSNR_CAP: f64 = 99.0;

fn check_dims(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension {
            msg: format!(
                "psnr/ssim inputs are {}x{} vs {}x{}",
                a.width, a.height, b.width, b.height
            ),
        });
    }
    Ok(())
}

/// 10 log10(1 / mse) over all channels of [0,1] images, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_dims(a, b)?;
    let mut acc = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for ch in 0..3 {
            let d = pa[ch] - pb[ch];
            acc += d * d;
        }
    }
    let mse = acc / (3 * a.data.len()) as f64;
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Structural similarity with the standard 11x11 Gaussian window; the
/// same implementation the training loss differentiates through.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_dims(a, b)?;
    crate::losses::ssim(&a.data, b)
}

/// Mean angle in degrees between rendered normals and a reference map,
/// over pixels where both sides carry a direction. Errors when that set
/// is empty.
pub fn mean_angular_error_deg(rendered: &[Vec3f], reference: &NormalMap) -> Result<f64> {
    if rendered.len() != reference.dirs.len() {
        return Err(Error::Dimension {
            msg: format!(
                "{} rendered normals vs {} reference pixels",
                rendered.len(),
                reference.dirs.len()
            ),
        });
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (n, (d, &valid)) in rendered
        .iter()
        .zip(reference.dirs.iter().zip(&reference.valid))
    {
        if !valid || n.norm() < 1e-9 {
            continue;
        }
        let dot = (n.x * d[0] + n.y * d[1] + n.z * d[2]).clamp(-1.0, 1.0);
        acc += dot.acos().to_degrees();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain {
            op: "mean_angular_error",
            msg: "no pixel has a normal on both sides".into(),
        });
    }
    Ok(acc / count as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameEval {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub ms_per_frame: f64,
}

fn image_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("pfm") | Some("ppm")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Scores every image in `render_dir` against the same-named image in
/// `gt_dir` (matched by file stem, `.pfm`/`.ppm`). Frames are scored in
/// parallel; the report keeps name order.
pub fn evaluate(render_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let renders = image_stems(render_dir)?;
    let gts = image_stems(gt_dir)?;
    if renders.is_empty() {
        return Err(Error::Config(format!(
            "no .pfm/.ppm images in {}",
            render_dir.display()
        )));
    }
    let pairs: Vec<(String, std::path::PathBuf, std::path::PathBuf)> = renders
        .into_iter()
        .map(|(stem, rp)| {
            let gp = gts.get(&stem).ok_or_else(|| {
                Error::Config(format!(
                    "render {} has no ground-truth match in {}",
                    stem,
                    gt_dir.display()
                ))
            })?;
            Ok((stem, rp, gp.clone()))
        })
        .collect::<Result<_>>()?;

    let clock = Instant::now();
    let scored = crate::parallel::map_indexed(pairs.len(), |i| -> Result<FrameEval> {
        let (name, rp, gp) = &pairs[i];
        let render = load_rgb(rp)?;
        let gt = load_rgb(gp)?;
        Ok(FrameEval {
            name: name.clone(),
            psnr: psnr(&render, &gt)?,
            ssim: ssim(&render, &gt)?,
        })
    });
    let frames: Vec<FrameEval> = scored.into_iter().collect::<Result<_>>()?;
    let n = frames.len() as f64;
    Ok(EvalReport {
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        ms_per_frame: clock.elapsed().as_secs_f64() * 1e3 / n,
        frames,
    })
}
