//! Synthetic RGBD dataset generator: a noisy far background plane with one
//! to three nearer convex shapes of clearly distinct color, plus exact
//! ground-truth masks. Fully seeded, bit-reproducible.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imageio::{srgb_to_lab_channels, write_gray16_png, write_gray8_png, write_rgb8_png};

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    /// Per-pixel uniform color noise, in 8-bit channel units.
    pub color_noise: f64,
    /// Per-pixel uniform depth noise, in raw 16-bit units.
    pub depth_noise: f64,
    /// Probability that an object is split into two color tones; two-tone
    /// objects are only held together by their depth coherence, which is
    /// what the propagation stage exploits.
    pub two_tone_prob: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 64,
            height: 64,
            color_noise: 22.0,
            depth_noise: 4000.0,
            two_tone_prob: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<u16>,
    pub gt: Vec<u8>,
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, .. } => (cx, cy),
            Shape::Rect { x0, y0, x1, y1 } => ((x0 + x1) / 2.0, (y0 + y1) / 2.0),
        }
    }
}

/// One object: a shape, its depth, and one or two color tones split along a
/// random chord through the shape center.
#[derive(Clone, Copy)]
struct SceneObject {
    shape: Shape,
    depth: f64,
    color: [f64; 3],
    second_tone: Option<([f64; 3], f64)>, // color, split angle
}

impl SceneObject {
    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        match self.second_tone {
            Some((tone, angle)) => {
                let (cx, cy) = self.shape.center();
                let side = (x - cx) * angle.cos() + (y - cy) * angle.sin();
                if side >= 0.0 {
                    self.color
                } else {
                    tone
                }
            }
            None => self.color,
        }
    }
}

fn lab_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(30.0..225.0),
        rng.gen_range(30.0..225.0),
        rng.gen_range(30.0..225.0),
    ]
}

/// Rejection-samples a color at Lab distance >= 25 from the background.
fn distinct_color(rng: &mut ChaCha8Rng, bg_lab: [f64; 3]) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        let lab = srgb_to_lab_channels(c[0], c[1], c[2]);
        if lab_distance(lab, bg_lab) >= 25.0 {
            return c;
        }
    }
}

/// Generates image `index` of a dataset seeded by `seed`.
pub fn generate_image(seed: u64, index: usize, params: &SynthParams) -> SynthImage {
    let key = crate::nn::hash_bytes(
        seed,
        (index as u64).to_le_bytes().into_iter().chain(*b"synth"),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let (w, h) = (params.width, params.height);
    let area = (w * h) as f64;

    let bg_color = random_color(&mut rng);
    let bg_lab = srgb_to_lab_channels(bg_color[0], bg_color[1], bg_color[2]);

    // Objects: distinct color (Lab distance >= 25 from the background, by
    // rejection), clearly nearer depth, each at least 4% of the image area,
    // the union below half of it.
    let n_objects = rng.gen_range(1..=3usize);
    let mut objects: Vec<SceneObject> = Vec::new();
    'outer: loop {
        objects.clear();
        for _ in 0..n_objects {
            let frac = rng.gen_range(0.05..0.14);
            let shape = if rng.gen::<bool>() {
                let aspect = rng.gen_range(0.6..1.6);
                let rx = (frac * area * aspect / std::f64::consts::PI).sqrt();
                let ry = rx / aspect;
                let cx = rng.gen_range(0.2 * w as f64..0.8 * w as f64);
                let cy = rng.gen_range(0.2 * h as f64..0.8 * h as f64);
                Shape::Ellipse {
                    cx,
                    cy,
                    rx: rx.min(0.45 * w as f64),
                    ry: ry.min(0.45 * h as f64),
                }
            } else {
                let aspect = rng.gen_range(0.6..1.6);
                let rw = (frac * area * aspect).sqrt().min(0.8 * w as f64);
                let rh = (frac * area / aspect).sqrt().min(0.8 * h as f64);
                let x0 = rng.gen_range(0.05 * w as f64..(w as f64 * 0.95 - rw));
                let y0 = rng.gen_range(0.05 * h as f64..(h as f64 * 0.95 - rh));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rw,
                    y1: y0 + rh,
                }
            };
            let color = distinct_color(&mut rng, bg_lab);
            let second_tone = if rng.gen::<f64>() < params.two_tone_prob {
                // the tone pair's mean must also stay clear of the background
                let color_lab = srgb_to_lab_channels(color[0], color[1], color[2]);
                let tone = loop {
                    let t = distinct_color(&mut rng, bg_lab);
                    let t_lab = srgb_to_lab_channels(t[0], t[1], t[2]);
                    let mean = [
                        (color_lab[0] + t_lab[0]) / 2.0,
                        (color_lab[1] + t_lab[1]) / 2.0,
                        (color_lab[2] + t_lab[2]) / 2.0,
                    ];
                    if lab_distance(mean, bg_lab) >= 25.0 {
                        break t;
                    }
                };
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                Some((tone, angle))
            } else {
                None
            };
            let depth = rng.gen_range(8_000.0..30_000.0);
            objects.push(SceneObject {
                shape,
                depth,
                color,
                second_tone,
            });
        }
        // enforce the generator contract on the union mask
        let mut covered = 0usize;
        let mut any_small = false;
        for obj in &objects {
            let own = (0..w * h)
                .filter(|&i| obj.shape.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
                .count();
            if (own as f64) < 0.04 * area {
                any_small = true;
            }
        }
        for i in 0..w * h {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            if objects.iter().any(|o| o.shape.contains(x, y)) {
                covered += 1;
            }
        }
        if !any_small && covered > 0 && (covered as f64) < 0.5 * area {
            break 'outer;
        }
    }

    let mut rgb = vec![[0.0f32; 3]; w * h];
    let mut depth = vec![0u16; w * h];
    let mut gt = vec![0u8; w * h];
    let bg_depth = 43_000.0f64;
    for i in 0..w * h {
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let owner = objects.iter().find(|o| o.shape.contains(x, y));
        let (base_color, base_depth, is_object) = match owner {
            Some(o) => (o.color_at(x, y), o.depth, true),
            None => (bg_color, bg_depth, false),
        };
        for c in 0..3 {
            let noise = rng.gen_range(-params.color_noise..params.color_noise);
            rgb[i][c] = (base_color[c] + noise).clamp(0.0, 255.0) as f32;
        }
        let dn = rng.gen_range(-params.depth_noise..params.depth_noise);
        depth[i] = (base_depth + dn).clamp(0.0, 65535.0) as u16;
        gt[i] = u8::from(is_object);
    }
    SynthImage {
        width: w,
        height: h,
        rgb,
        depth,
        gt,
    }
}

/// Writes `n_images` synthetic images into `rgb/`, `depth/`, `gt/` under
/// `out_dir`, named `00000.png` onward. Returns the file stems.
pub fn generate_dataset(
    out_dir: &Path,
    n_images: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Vec<String>> {
    let rgb_dir = out_dir.join("rgb");
    let depth_dir = out_dir.join("depth");
    let gt_dir = out_dir.join("gt");
    std::fs::create_dir_all(&rgb_dir)?;
    std::fs::create_dir_all(&depth_dir)?;
    std::fs::create_dir_all(&gt_dir)?;
    let mut names = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let img = generate_image(seed, i, params);
        let name = format!("{i:05}.png");
        write_rgb8_png(&rgb_dir.join(&name), img.width, img.height, &img.rgb)?;
        write_gray16_png(&depth_dir.join(&name), img.width, img.height, &img.depth)?;
        let gt_bytes: Vec<u8> = img.gt.iter().map(|&g| g * 255).collect();
        write_gray8_png(&gt_dir.join(&name), img.width, img.height, &gt_bytes)?;
        names.push(name);
    }
    Ok(names)
}
