//! Image I/O: binary PPM (P6, 8-bit) for LDR output and PFM (32-bit float)
//! for ground truth, depth, normals, and other buffers that must survive
//! storage without quantization.
//!
//! In-memory layout is row-major with row 0 at the top. PFM files are
//! written little-endian (scale -1.0) with scanlines bottom-up, per the
//! format; the flip happens at the file boundary.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// `height * width` pixels, row-major from the top-left.
    pub data: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height);
        ImageRgb {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

impl ImageGray {
    pub fn from_pixels(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        ImageGray {
            width,
            height,
            data,
        }
    }
}

/// External normal map: unit directions where `valid`, zero elsewhere.
/// Pixels whose stored vector has norm under 1e-6 are masked out.
#[derive(Clone, Debug)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub dirs: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Pulls whitespace-separated header tokens, skipping `#` comments (PPM
/// allows them anywhere in the header).
struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        TokenReader { bytes, pos: 0 }
    }

    fn token(&mut self) -> Option<&'a str> {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            std::str::from_utf8(&self.bytes[start..self.pos]).ok()
        }
    }

    /// Consumes the single whitespace byte that terminates a header, leaving
    /// `pos` at the first payload byte.
    fn skip_one_whitespace(&mut self) {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }
}

fn parse_dim(path: &Path, tok: Option<&str>, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::image(path, format!("bad or missing {}", what)))
}

pub fn save_ppm(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut out = Vec::with_capacity(20 + img.data.len() * 3);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height).unwrap();
    for px in &img.data {
        for c in px {
            let q = (c.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(q);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<ImageRgb> {
    let bytes = read_bytes(path)?;
    let mut r = TokenReader::new(&bytes);
    match r.token() {
        Some("P6") => {}
        other => {
            return Err(Error::image(
                path,
                format!("expected P6 magic, got {:?}", other),
            ))
        }
    }
    let width = parse_dim(path, r.token(), "width")?;
    let height = parse_dim(path, r.token(), "height")?;
    let maxval = parse_dim(path, r.token(), "maxval")?;
    if maxval != 255 {
        return Err(Error::image(path, format!("unsupported maxval {}", maxval)));
    }
    r.skip_one_whitespace();
    let need = width * height * 3;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(Error::image(
            path,
            format!("truncated: need {} pixel bytes, have {}", need, payload.len()),
        ));
    }
    let data = payload[..need]
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] as f64 / 255.0,
                c[1] as f64 / 255.0,
                c[2] as f64 / 255.0,
            ]
        })
        .collect();
    Ok(ImageRgb {
        width,
        height,
        data,
    })
}

fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, rows_top_down: &[f32]) -> Result<()> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = Vec::with_capacity(32 + rows_top_down.len() * 4);
    write!(out, "{}\n{} {}\n-1.0\n", magic, width, height).unwrap();
    let row_len = width * channels;
    for y in (0..height).rev() {
        let row = &rows_top_down[y * row_len..(y + 1) * row_len];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    let mut r = TokenReader::new(&bytes);
    let channels = match r.token() {
        Some("PF") => 3,
        Some("Pf") => 1,
        other => {
            return Err(Error::image(
                path,
                format!("expected PF/Pf magic, got {:?}", other),
            ))
        }
    };
    let width = parse_dim(path, r.token(), "width")?;
    let height = parse_dim(path, r.token(), "height")?;
    let scale: f64 = r
        .token()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::image(path, "bad or missing scale"))?;
    if scale >= 0.0 {
        return Err(Error::image(
            path,
            "big-endian PFM (non-negative scale) is not supported",
        ));
    }
    r.skip_one_whitespace();
    let row_len = width * channels;
    let need = row_len * height * 4;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(Error::image(
            path,
            format!("truncated: need {} payload bytes, have {}", need, payload.len()),
        ));
    }
    // File rows are bottom-up; flip into top-down order.
    let mut data = vec![0.0f32; row_len * height];
    for (file_row, mem_row) in (0..height).rev().enumerate() {
        let src = &payload[file_row * row_len * 4..(file_row + 1) * row_len * 4];
        let dst = &mut data[mem_row * row_len..(mem_row + 1) * row_len];
        for (i, chunk) in src.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    Ok((width, height, channels, data))
}

pub fn save_pfm_rgb(path: &Path, img: &ImageRgb) -> Result<()> {
    let flat: Vec<f32> = img
        .data
        .iter()
        .flat_map(|px| px.iter().map(|&c| c as f32))
        .collect();
    write_pfm(path, img.width, img.height, 3, &flat)
}

pub fn save_pfm_gray(path: &Path, img: &ImageGray) -> Result<()> {
    let flat: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    write_pfm(path, img.width, img.height, 1, &flat)
}

pub fn load_pfm_rgb(path: &Path) -> Result<ImageRgb> {
    let (width, height, channels, data) = read_pfm(path)?;
    if channels != 3 {
        return Err(Error::image(path, "expected color PFM (PF), found grayscale"));
    }
    let pixels = data
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    Ok(ImageRgb {
        width,
        height,
        data: pixels,
    })
}

pub fn load_pfm_gray(path: &Path) -> Result<ImageGray> {
    let (width, height, channels, data) = read_pfm(path)?;
    if channels != 1 {
        return Err(Error::image(path, "expected grayscale PFM (Pf), found color"));
    }
    Ok(ImageGray {
        width,
        height,
        data: data.into_iter().map(|v| v as f64).collect(),
    })
}

/// Loads a color image by extension: `.ppm` or `.pfm`.
pub fn load_rgb(path: &Path) -> Result<ImageRgb> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => load_ppm(path),
        Some("pfm") => load_pfm_rgb(path),
        other => Err(Error::image(
            path,
            format!("unsupported image extension {:?}", other),
        )),
    }
}

/// Saves a color image by extension: `.ppm` (quantized 8-bit) or `.pfm`.
pub fn save_rgb(path: &Path, img: &ImageRgb) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => save_ppm(path, img),
        Some("pfm") => save_pfm_rgb(path, img),
        other => Err(Error::image(
            path,
            format!("unsupported image extension {:?}", other),
        )),
    }
}

/// Reads a color PFM of per-pixel world-space normals. Vectors are
/// renormalized; anything with norm under 1e-6 is masked invalid.
pub fn load_normal_map(path: &Path) -> Result<NormalMap> {
    let img = load_pfm_rgb(path)?;
    let mut dirs = Vec::with_capacity(img.data.len());
    let mut valid = Vec::with_capacity(img.data.len());
    for px in &img.data {
        let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
        if n < 1e-6 || !n.is_finite() {
            dirs.push([0.0; 3]);
            valid.push(false);
        } else {
            dirs.push([px[0] / n, px[1] / n, px[2] / n]);
            valid.push(true);
        }
    }
    Ok(NormalMap {
        width: img.width,
        height: img.height,
        dirs,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn asymmetric(w: usize, h: usize) -> ImageRgb {
        let mut img = ImageRgb::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.data[y * w + x] = [
                    x as f64 / w as f64,
                    y as f64 / h as f64,
                    (x * 7 + y * 3) as f64 % 11.0 / 11.0,
                ];
            }
        }
        img
    }

    #[test]
    fn pfm_round_trip_is_exact_in_f32() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.pfm");
        let mut img = asymmetric(5, 3);
        img.data[7] = [3.5, -1.25, 1e-20];
        save_pfm_rgb(&path, &img).unwrap();
        let back = load_pfm_rgb(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert_eq!(a[c] as f32, b[c] as f32);
                // loaded values are exactly the stored f32s
                assert_eq!(b[c], (a[c] as f32) as f64);
            }
        }
        assert_eq!(back.data[7][0], 3.5);
    }

    #[test]
    fn pfm_gray_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("d.pfm");
        let img = ImageGray::from_pixels(4, 2, (0..8).map(|i| i as f64 * 0.37).collect());
        save_pfm_gray(&path, &img).unwrap();
        let back = load_pfm_gray(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn pfm_scanlines_are_bottom_up_in_the_file() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("o.pfm");
        let img = ImageRgb::from_pixels(1, 2, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        save_pfm_rgb(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.len() - 2 * 3 * 4;
        // First stored row is the bottom one (green).
        let first = f32::from_le_bytes(bytes[header_end..header_end + 4].try_into().unwrap());
        assert_eq!(first, 0.0);
        let second =
            f32::from_le_bytes(bytes[header_end + 4..header_end + 8].try_into().unwrap());
        assert_eq!(second, 1.0);
        let back = load_pfm_rgb(&path).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn ppm_quantizes_to_8_bit() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.ppm");
        let img = asymmetric(6, 4);
        save_ppm(&path, &img).unwrap();
        let back = load_ppm(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        // Out-of-range values clamp rather than wrap.
        let hot = ImageRgb::from_pixels(1, 1, vec![[2.0, -1.0, 0.5]]);
        save_ppm(&path, &hot).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back.data[0][0], 1.0);
        assert_eq!(back.data[0][1], 0.0);
    }

    #[test]
    fn truncated_files_are_parse_errors() {
        let dir = TempDir::new().unwrap();
        let ppm = dir.path().join("t.ppm");
        std::fs::write(&ppm, b"P6\n4 4\n255\nabc").unwrap();
        assert!(matches!(load_ppm(&ppm), Err(Error::Image { .. })));

        let pfm = dir.path().join("t.pfm");
        std::fs::write(&pfm, b"PF\n4 4\n-1.0\nxx").unwrap();
        assert!(matches!(load_pfm_rgb(&pfm), Err(Error::Image { .. })));
    }

    #[test]
    fn wrong_magic_and_wrong_channel_count_are_errors() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("g.pfm");
        let img = ImageGray::from_pixels(2, 2, vec![0.0; 4]);
        save_pfm_gray(&path, &img).unwrap();
        assert!(load_pfm_rgb(&path).is_err());

        let color = dir.path().join("c.pfm");
        save_pfm_rgb(&color, &ImageRgb::new(2, 2)).unwrap();
        assert!(load_pfm_gray(&color).is_err());

        let junk = dir.path().join("j.ppm");
        std::fs::write(&junk, b"JUNK").unwrap();
        assert!(load_ppm(&junk).is_err());

        let noext = dir.path().join("file.xyz");
        std::fs::write(&noext, b"P6\n1 1\n255\nabc").unwrap();
        assert!(load_rgb(&noext).is_err());
    }

    #[test]
    fn normal_map_masks_degenerate_pixels() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("n.pfm");
        let img = ImageRgb::from_pixels(
            2,
            1,
            vec![[0.0, 0.0, 2.0], [1e-9, 0.0, 0.0]],
        );
        save_pfm_rgb(&path, &img).unwrap();
        let nm = load_normal_map(&path).unwrap();
        assert!(nm.valid[0]);
        assert_eq!(nm.dirs[0], [0.0, 0.0, 1.0]);
        assert!(!nm.valid[1]);
        assert_eq!(nm.dirs[1], [0.0; 3]);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&path, bytes).unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), [0.0, 1.0, 0.0]);
    }
}
