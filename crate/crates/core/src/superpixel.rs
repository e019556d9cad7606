//! SLIC superpixel segmentation and per-region statistics.
//!
//! Clustering runs in the 5-D (L, a, b, scaled x, scaled y) space for a fixed
//! 10 iterations with seeds on a regular grid, followed by a connectivity
//! pass that merges orphan fragments into their largest assigned neighbor.
//! Output is deterministic for a given input.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::RgbdImage;

const SLIC_ITERATIONS: usize = 10;

/// A per-pixel partition into 4-connected regions labeled `0..n_regions`.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub n_regions: usize,
}

impl Segmentation {
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }
}

/// Per-region means and weights feeding every feature formula.
#[derive(Debug, Clone)]
pub struct RegionStats {
    /// Mean CIELAB color per region.
    pub mean_lab: Vec<[f64; 3]>,
    /// Mean normalized depth per region.
    pub mean_depth: Vec<f64>,
    /// Region centroid, each axis normalized to [0,1] by image width/height.
    pub centroid: Vec<[f64; 2]>,
    /// Pixel count divided by total pixel count; sums to 1.
    pub weight: Vec<f64>,
}

impl RegionStats {
    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }
}

struct Center {
    x: f64,
    y: f64,
    lab: [f64; 3],
}

/// Segments an image into approximately `n_target` superpixels.
///
/// `compactness` trades color against spatial proximity, in Lab units over
/// one grid step. Fails when the image is smaller than the seed grid step.
pub fn slic_segment(img: &RgbdImage, n_target: usize, compactness: f64) -> Result<Segmentation> {
    if n_target < 2 {
        return Err(Error::Config(format!(
            "need at least 2 superpixels, got {n_target}"
        )));
    }
    if compactness <= 0.0 {
        return Err(Error::Config("compactness must be positive".into()));
    }
    let (w, h) = (img.width, img.height);
    let step = ((w * h) as f64 / n_target as f64).sqrt();
    if step > w as f64 || step > h as f64 {
        return Err(Error::DegenerateInput(format!(
            "image {w}x{h} is smaller than the grid step {step:.1} for {n_target} superpixels"
        )));
    }

    let (nx, ny) = seed_grid(w, h, n_target);
    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * w as f64 / nx as f64;
            let y = (j as f64 + 0.5) * h as f64 / ny as f64;
            let px = (x as usize).min(w - 1);
            let py = (y as usize).min(h - 1);
            centers.push(Center {
                x,
                y,
                lab: img.lab[py * w + px],
            });
        }
    }

    // Spatial coordinates enter the 5-D distance scaled by compactness/step.
    let spatial = compactness / step;
    let mut labels = vec![u32::MAX; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    let reach = (2.0 * step).ceil() as isize;

    for _ in 0..SLIC_ITERATIONS {
        best.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = ((c.x as isize) - reach).max(0) as usize;
            let x1 = (((c.x as isize) + reach) as usize).min(w - 1);
            let y0 = ((c.y as isize) - reach).max(0) as usize;
            let y1 = (((c.y as isize) + reach) as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let idx = y * w + x;
                    let lab = img.lab[idx];
                    let dl = lab[0] - c.lab[0];
                    let da = lab[1] - c.lab[1];
                    let db = lab[2] - c.lab[2];
                    let dx = (x as f64 + 0.5 - c.x) * spatial;
                    let dy = (y as f64 + 0.5 - c.y) * spatial;
                    let d = dl * dl + da * da + db * db + dx * dx + dy * dy;
                    if d < best[idx] {
                        best[idx] = d;
                        labels[idx] = k as u32;
                    }
                }
            }
        }

        // Pixels outside every search window (possible once centers drift)
        // fall back to a full scan.
        for idx in 0..labels.len() {
            if labels[idx] == u32::MAX {
                let (x, y) = (idx % w, idx / w);
                let lab = img.lab[idx];
                let mut d_min = f64::INFINITY;
                for (k, c) in centers.iter().enumerate() {
                    let dl = lab[0] - c.lab[0];
                    let da = lab[1] - c.lab[1];
                    let db = lab[2] - c.lab[2];
                    let dx = (x as f64 + 0.5 - c.x) * spatial;
                    let dy = (y as f64 + 0.5 - c.y) * spatial;
                    let d = dl * dl + da * da + db * db + dx * dx + dy * dy;
                    if d < d_min {
                        d_min = d;
                        labels[idx] = k as u32;
                    }
                }
            }
        }

        // Recompute centers as cluster means; empty clusters keep their spot.
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            let lab = img.lab[idx];
            a[0] += lab[0];
            a[1] += lab[1];
            a[2] += lab[2];
            a[3] += (idx % w) as f64 + 0.5;
            a[4] += (idx / w) as f64 + 0.5;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                c.lab = [a[0] / a[5], a[1] / a[5], a[2] / a[5]];
                c.x = a[3] / a[5];
                c.y = a[4] / a[5];
            }
        }
    }

    let n_regions = enforce_connectivity(&mut labels, w, h);
    Ok(Segmentation {
        width: w,
        height: h,
        labels,
        n_regions,
    })
}

/// Picks seed grid dimensions whose product is closest to `n_target`,
/// preferring more columns on ties.
fn seed_grid(w: usize, h: usize, n_target: usize) -> (usize, usize) {
    let ideal_nx = (n_target as f64 * w as f64 / h as f64).sqrt();
    let mut best: Option<(usize, usize)> = None;
    for nx in [ideal_nx.floor() as usize, ideal_nx.ceil() as usize] {
        let nx = nx.max(1).min(w);
        for ny in [
            (n_target as f64 / nx as f64).floor() as usize,
            (n_target as f64 / nx as f64).ceil() as usize,
        ] {
            let ny = ny.max(1).min(h);
            let better = match best {
                None => true,
                Some((bx, by)) => {
                    let cur = (nx * ny) as i64 - n_target as i64;
                    let old = (bx * by) as i64 - n_target as i64;
                    cur.abs() < old.abs() || (cur.abs() == old.abs() && nx > bx)
                }
            };
            if better {
                best = Some((nx, ny));
            }
        }
    }
    best.unwrap()
}

/// Splits every label into 4-connected components, keeps the largest one per
/// label, merges each remaining fragment into its largest assigned neighbor,
/// and relabels compactly in raster order. Returns the region count.
fn enforce_connectivity(labels: &mut [u32], w: usize, h: usize) -> usize {
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    // first pixel, size, original label
    let mut comps: Vec<(usize, usize, u32)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let label = labels[start];
        let mut size = 0usize;
        comp[start] = id;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let (x, y) = (idx % w, idx / w);
            let mut visit = |nidx: usize| {
                if comp[nidx] == usize::MAX && labels[nidx] == label {
                    comp[nidx] = id;
                    queue.push_back(nidx);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
        comps.push((start, size, label));
    }

    // Largest component wins its label; earlier component on ties.
    let max_label = comps.iter().map(|c| c.2).max().unwrap() as usize;
    let mut primary = vec![usize::MAX; max_label + 1];
    for (id, &(_, size, label)) in comps.iter().enumerate() {
        let cur = primary[label as usize];
        if cur == usize::MAX || comps[cur].1 < size {
            primary[label as usize] = id;
        }
    }

    // root[c]: the surviving component a fragment was merged into.
    let mut root = vec![usize::MAX; comps.len()];
    let mut root_size = vec![0usize; comps.len()];
    for (id, &(_, size, label)) in comps.iter().enumerate() {
        if primary[label as usize] == id {
            root[id] = id;
            root_size[id] = size;
        }
    }
    loop {
        let mut unresolved = 0usize;
        let mut progressed = false;
        for id in 0..comps.len() {
            if root[id] != usize::MAX {
                continue;
            }
            // Largest currently-assigned neighbor region; earlier first pixel
            // breaks ties.
            let mut target = usize::MAX;
            for idx in 0..n {
                if comp[idx] != id {
                    continue;
                }
                let (x, y) = (idx % w, idx / w);
                let mut consider = |nidx: usize| {
                    let nc = comp[nidx];
                    if nc != id && root[nc] != usize::MAX {
                        let r = root[nc];
                        if target == usize::MAX
                            || root_size[r] > root_size[target]
                            || (root_size[r] == root_size[target]
                                && comps[r].0 < comps[target].0)
                        {
                            target = r;
                        }
                    }
                };
                if x > 0 {
                    consider(idx - 1);
                }
                if x + 1 < w {
                    consider(idx + 1);
                }
                if y > 0 {
                    consider(idx - w);
                }
                if y + 1 < h {
                    consider(idx + w);
                }
            }
            if target != usize::MAX {
                root[id] = target;
                root_size[target] += comps[id].1;
                progressed = true;
            } else {
                unresolved += 1;
            }
        }
        if unresolved == 0 {
            break;
        }
        assert!(progressed, "orphan components must shrink every pass");
    }

    // Compact relabel in raster order of first occurrence.
    let mut new_label = vec![u32::MAX; comps.len()];
    let mut next = 0u32;
    for idx in 0..n {
        let r = root[comp[idx]];
        if new_label[r] == u32::MAX {
            new_label[r] = next;
            next += 1;
        }
        labels[idx] = new_label[r];
    }
    next as usize
}

/// Exact per-region means, centroids and weights.
pub fn region_stats(seg: &Segmentation, img: &RgbdImage) -> Result<RegionStats> {
    if seg.width != img.width || seg.height != img.height {
        return Err(Error::Alignment(format!(
            "segmentation {}x{} does not match image {}x{}",
            seg.width, seg.height, img.width, img.height
        )));
    }
    let k = seg.n_regions;
    let mut lab = vec![[0.0f64; 3]; k];
    let mut depth = vec![0.0f64; k];
    let mut cx = vec![0.0f64; k];
    let mut cy = vec![0.0f64; k];
    let mut count = vec![0usize; k];
    for (idx, &l) in seg.labels.iter().enumerate() {
        let r = l as usize;
        let p = img.lab[idx];
        lab[r][0] += p[0];
        lab[r][1] += p[1];
        lab[r][2] += p[2];
        depth[r] += img.depth[idx];
        cx[r] += (idx % seg.width) as f64 + 0.5;
        cy[r] += (idx / seg.width) as f64 + 0.5;
        count[r] += 1;
    }
    let total = seg.labels.len() as f64;
    let mut stats = RegionStats {
        mean_lab: Vec::with_capacity(k),
        mean_depth: Vec::with_capacity(k),
        centroid: Vec::with_capacity(k),
        weight: Vec::with_capacity(k),
    };
    for r in 0..k {
        let c = count[r] as f64;
        stats.mean_lab.push([lab[r][0] / c, lab[r][1] / c, lab[r][2] / c]);
        stats.mean_depth.push(depth[r] / c);
        stats
            .centroid
            .push([cx[r] / c / seg.width as f64, cy[r] / c / seg.height as f64]);
        stats.weight.push(c / total);
    }
    Ok(stats)
}

/// Region adjacency from 4-neighbor pixel contacts: symmetric, irreflexive,
/// each neighbor list sorted ascending.
pub fn adjacency(seg: &Segmentation) -> Vec<Vec<usize>> {
    let (w, h) = (seg.width, seg.height);
    let mut sets = vec![std::collections::BTreeSet::new(); seg.n_regions];
    let mut touch = |a: u32, b: u32| {
        if a != b {
            sets[a as usize].insert(b as usize);
            sets[b as usize].insert(a as usize);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let l = seg.labels[y * w + x];
            if x + 1 < w {
                touch(l, seg.labels[y * w + x + 1]);
            }
            if y + 1 < h {
                touch(l, seg.labels[(y + 1) * w + x]);
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Regions touching the image border, ordered clockwise from the top-left
/// corner by first border contact. When more than `n_b` touch, the `n_b`
/// with the longest border contact are kept (still in clockwise order).
pub fn boundary_regions(seg: &Segmentation, n_b: usize) -> Vec<usize> {
    assert!(n_b >= 1, "n_b must be at least 1");
    let mut first = vec![usize::MAX; seg.n_regions];
    let mut contact = vec![0usize; seg.n_regions];
    for (pos, idx) in border_walk(seg.width, seg.height).enumerate() {
        let r = seg.labels[idx] as usize;
        contact[r] += 1;
        if first[r] == usize::MAX {
            first[r] = pos;
        }
    }
    let mut regions: Vec<usize> = (0..seg.n_regions).filter(|&r| contact[r] > 0).collect();
    if regions.len() > n_b {
        regions.sort_by(|&a, &b| contact[b].cmp(&contact[a]).then(first[a].cmp(&first[b])));
        regions.truncate(n_b);
    }
    regions.sort_by_key(|&r| first[r]);
    regions
}

/// Clockwise walk over border pixel indices starting at the top-left corner.
fn border_walk(w: usize, h: usize) -> impl Iterator<Item = usize> {
    let top = 0..w;
    let right = (1..h).map(move |y| y * w + (w - 1));
    let bottom = (0..w.saturating_sub(1)).rev().map(move |x| (h - 1) * w + x);
    let left = (1..h.saturating_sub(1)).rev().map(move |y| y * w);
    top.chain(right).chain(bottom).chain(left)
}

/// Debug dump: the label map as a 16-bit grayscale PNG.
pub fn write_label_map(path: &Path, seg: &Segmentation) -> Result<()> {
    if seg.n_regions > u16::MAX as usize + 1 {
        return Err(Error::Shape(format!(
            "{} regions exceed 16-bit label map",
            seg.n_regions
        )));
    }
    let values: Vec<u16> = seg.labels.iter().map(|&l| l as u16).collect();
    crate::imageio::write_gray16_png(path, seg.width, seg.height, &values)
}

/// Debug dump: region statistics as CSV.
pub fn write_region_stats_csv(path: &Path, stats: &RegionStats) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "index,L,a,b,depth,cx,cy,weight")?;
    for r in 0..stats.len() {
        let [l, a, b] = stats.mean_lab[r];
        let [cx, cy] = stats.centroid[r];
        writeln!(
            out,
            "{r},{l},{a},{b},{},{cx},{cy},{}",
            stats.mean_depth[r], stats.weight[r]
        )?;
    }
    Ok(())
}
