//! Image-level training augmentation: horizontal flips, crops standing in
//! for translations, and RGB intensity jitter applied before the Lab
//! conversion. Depth and ground truth follow every geometric transform.

use rand::Rng;

use crate::imageio::{srgb_to_lab_channels, RgbdImage};

pub fn flip_horizontal(img: &RgbdImage) -> RgbdImage {
    let (w, h) = (img.width, img.height);
    let flip_idx = |i: usize| {
        let (x, y) = (i % w, i / w);
        y * w + (w - 1 - x)
    };
    let remap_rgb: Vec<[f32; 3]> = (0..w * h).map(|i| img.rgb[flip_idx(i)]).collect();
    let remap_lab: Vec<[f64; 3]> = (0..w * h).map(|i| img.lab[flip_idx(i)]).collect();
    let remap_depth: Vec<f64> = (0..w * h).map(|i| img.depth[flip_idx(i)]).collect();
    let remap_gt = img
        .gt
        .as_ref()
        .map(|gt| (0..w * h).map(|i| gt[flip_idx(i)]).collect());
    RgbdImage {
        width: w,
        height: h,
        rgb: remap_rgb,
        lab: remap_lab,
        depth: remap_depth,
        gt: remap_gt,
    }
}

/// Crops a window; depth values are kept as-is (no renormalization).
pub fn crop(img: &RgbdImage, ox: usize, oy: usize, cw: usize, ch: usize) -> RgbdImage {
    assert!(ox + cw <= img.width && oy + ch <= img.height && cw > 0 && ch > 0);
    let mut rgb = Vec::with_capacity(cw * ch);
    let mut lab = Vec::with_capacity(cw * ch);
    let mut depth = Vec::with_capacity(cw * ch);
    let mut gt = img.gt.as_ref().map(|_| Vec::with_capacity(cw * ch));
    for y in oy..oy + ch {
        for x in ox..ox + cw {
            let i = y * img.width + x;
            rgb.push(img.rgb[i]);
            lab.push(img.lab[i]);
            depth.push(img.depth[i]);
            if let (Some(dst), Some(src)) = (gt.as_mut(), img.gt.as_ref()) {
                dst.push(src[i]);
            }
        }
    }
    RgbdImage {
        width: cw,
        height: ch,
        rgb,
        lab,
        depth,
        gt,
    }
}

/// Scales the sRGB channels by per-channel factors (clamped to [0,255]) and
/// rederives Lab. Geometry, depth and ground truth are untouched.
pub fn jitter_rgb(img: &RgbdImage, factors: [f64; 3]) -> RgbdImage {
    let rgb: Vec<[f32; 3]> = img
        .rgb
        .iter()
        .map(|px| {
            [
                (px[0] as f64 * factors[0]).clamp(0.0, 255.0) as f32,
                (px[1] as f64 * factors[1]).clamp(0.0, 255.0) as f32,
                (px[2] as f64 * factors[2]).clamp(0.0, 255.0) as f32,
            ]
        })
        .collect();
    let lab = rgb
        .iter()
        .map(|&[r, g, b]| srgb_to_lab_channels(r as f64, g as f64, b as f64))
        .collect();
    RgbdImage {
        width: img.width,
        height: img.height,
        rgb,
        lab,
        depth: img.depth.clone(),
        gt: img.gt.clone(),
    }
}

/// Samples one augmented variant: flip with probability 1/2, a crop keeping
/// at least 90% of each dimension, and channel jitter uniform in [0.9,1.1].
pub fn augment<R: Rng>(
    img: &RgbdImage,
    rng: &mut R,
    flip: bool,
    do_crop: bool,
    jitter: bool,
) -> RgbdImage {
    let mut out = if flip && rng.gen::<f64>() < 0.5 {
        flip_horizontal(img)
    } else {
        img.clone()
    };
    if do_crop {
        let min_w = ((out.width as f64) * 0.9).ceil() as usize;
        let min_h = ((out.height as f64) * 0.9).ceil() as usize;
        let cw = rng.gen_range(min_w..=out.width);
        let ch = rng.gen_range(min_h..=out.height);
        let ox = rng.gen_range(0..=out.width - cw);
        let oy = rng.gen_range(0..=out.height - ch);
        if (cw, ch) != (out.width, out.height) || (ox, oy) != (0, 0) {
            out = crop(&out, ox, oy, cw, ch);
        }
    }
    if jitter {
        let factors = [
            rng.gen_range(0.9..1.1),
            rng.gen_range(0.9..1.1),
            rng.gen_range(0.9..1.1),
        ];
        out = jitter_rgb(&out, factors);
    }
    out
}
