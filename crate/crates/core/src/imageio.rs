//! Loading, alignment and normalization of RGBD inputs.
//!
//! Color features downstream are computed in CIELAB, so images are converted
//! on load. Depth is min-max normalized per image to [0,1]; sensor depth
//! ranges vary too much between capture devices for a fixed scale to make
//! sense. Ground-truth masks are binarized at half their maximum value so
//! anti-aliased masks survive.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

/// An aligned RGBD image with optional ground-truth mask.
///
/// `rgb` keeps the raw sRGB channels (in [0,255]) so augmentation can jitter
/// them before the Lab conversion; `lab` is always derived from `rgb`.
#[derive(Debug, Clone)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub lab: Vec<[f64; 3]>,
    /// Depth in [0,1] after per-image min-max normalization.
    pub depth: Vec<f64>,
    /// Binary mask, 0 or 1 per pixel.
    pub gt: Option<Vec<u8>>,
}

impl RgbdImage {
    /// Builds an image from raw parts, normalizing depth and deriving Lab.
    ///
    /// `depth` may be in any raw scale; `gt` must already be 0/1.
    pub fn from_parts(
        width: usize,
        height: usize,
        rgb: Vec<[f32; 3]>,
        mut depth: Vec<f64>,
        gt: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n = width * height;
        if rgb.len() != n || depth.len() != n {
            return Err(Error::Alignment(format!(
                "expected {} pixels, got rgb={} depth={}",
                n,
                rgb.len(),
                depth.len()
            )));
        }
        if let Some(ref g) = gt {
            if g.len() != n {
                return Err(Error::Alignment(format!(
                    "ground truth has {} pixels, image has {}",
                    g.len(),
                    n
                )));
            }
            if g.iter().any(|&v| v > 1) {
                return Err(Error::Format("ground truth mask must be 0/1".into()));
            }
        }
        normalize_depth(&mut depth);
        let lab = rgb
            .iter()
            .map(|&[r, g, b]| srgb_to_lab_channels(r as f64, g as f64, b as f64))
            .collect();
        Ok(RgbdImage {
            width,
            height,
            rgb,
            lab,
            depth,
            gt,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

// Linear-RGB -> XYZ matrix for sRGB primaries under D65. The reference white
// is taken as the exact row sums so that grays map to a = b = 0 exactly.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn white_point() -> [f64; 3] {
    let m = &SRGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
}

fn srgb_decode(c: f64) -> f64 {
    let c = c / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (channels in [0,255], not necessarily integral) -> CIELAB under D65.
pub fn srgb_to_lab_channels(r: f64, g: f64, b: f64) -> [f64; 3] {
    let (rl, gl, bl) = (srgb_decode(r), srgb_decode(g), srgb_decode(b));
    let m = &SRGB_TO_XYZ;
    let x = m[0][0] * rl + m[0][1] * gl + m[0][2] * bl;
    let y = m[1][0] * rl + m[1][1] * gl + m[1][2] * bl;
    let z = m[2][0] * rl + m[2][1] * gl + m[2][2] * bl;
    let [xn, yn, zn] = white_point();
    let (fx, fy, fz) = (lab_f(x / xn), lab_f(y / yn), lab_f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB 8-bit triplet -> CIELAB (L in [0,100], a/b roughly [-128,127]).
pub fn srgb_to_lab(r: u8, g: u8, b: u8) -> [f64; 3] {
    srgb_to_lab_channels(r as f64, g as f64, b as f64)
}

/// Min-max normalizes values to [0,1] in place. A constant input becomes all
/// zeros: a constant map carries no contrast information. Idempotent.
pub fn normalize_depth(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / range);
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit 3-channel PNG as raw sRGB channels.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<[f32; 3]>)> {
    match open(path)? {
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let px = img
                .pixels()
                .map(|p| [p.0[0] as f32, p.0[1] as f32, p.0[2] as f32])
                .collect();
            Ok((w as usize, h as usize, px))
        }
        other => Err(Error::Format(format!(
            "{}: expected 8-bit RGB, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads an 8- or 16-bit single-channel PNG as raw scalar values.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok((
                w as usize,
                h as usize,
                img.pixels().map(|p| p.0[0] as f64).collect(),
            ))
        }
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok((
                w as usize,
                h as usize,
                img.pixels().map(|p| p.0[0] as f64).collect(),
            ))
        }
        other => Err(Error::Format(format!(
            "{}: expected 8/16-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads a mask PNG and binarizes it at half of its maximum value.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, raw) = read_gray_png(path)?;
    Ok((w, h, binarize_mask(&raw)))
}

/// Binarizes raw mask values at 0.5 x max. An all-zero mask stays empty.
pub fn binarize_mask(raw: &[f64]) -> Vec<u8> {
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0; raw.len()];
    }
    let thr = 0.5 * max;
    raw.iter().map(|&v| u8::from(v >= thr)).collect()
}

/// Loads an aligned RGBD image (and optional ground truth) from PNG files.
pub fn load_rgbd(rgb_path: &Path, depth_path: &Path, gt_path: Option<&Path>) -> Result<RgbdImage> {
    let (w, h, rgb) = read_rgb_png(rgb_path)?;
    let (dw, dh, depth) = read_gray_png(depth_path)?;
    if (dw, dh) != (w, h) {
        return Err(Error::Alignment(format!(
            "depth {}x{} does not match rgb {}x{}",
            dw, dh, w, h
        )));
    }
    let gt = match gt_path {
        Some(p) => {
            let (gw, gh, mask) = read_mask_png(p)?;
            if (gw, gh) != (w, h) {
                return Err(Error::Alignment(format!(
                    "ground truth {}x{} does not match rgb {}x{}",
                    gw, gh, w, h
                )));
            }
            Some(mask)
        }
        None => None,
    };
    RgbdImage::from_parts(w, h, rgb, depth, gt)
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray8_png(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
            .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a 16-bit grayscale PNG (used for label maps and synthetic depth).
pub fn write_gray16_png(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
            .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes an 8-bit RGB PNG from raw channel values (clamped to [0,255]).
pub fn write_rgb8_png(path: &Path, width: usize, height: usize, rgb: &[[f32; 3]]) -> Result<()> {
    let mut buf = Vec::with_capacity(rgb.len() * 3);
    for px in rgb {
        for &c in px {
            buf.push(c.round().clamp(0.0, 255.0) as u8);
        }
    }
    let img: ImageBuffer<image::Rgb<u8>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, buf)
            .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
