//! Graph propagation of high-confidence labels into a spatially consistent
//! saliency map.
//!
//! Seeds are picked by Otsu thresholds over the per-region class
//! probabilities, the affinity couples regions at graph distance one or two
//! through color and depth similarity, and the solution of
//! `(I - alpha*S) F = Y` (S the symmetrically normalized affinity) is found
//! per column with Jacobi-preconditioned conjugate gradient. `I - alpha*S`
//! is symmetric positive definite for alpha in (0,1), so CG applies.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::RgbdImage;
use crate::superpixel::{RegionStats, Segmentation};

/// Symmetric nonnegative affinity with zero diagonal, stored as sorted
/// per-row adjacency lists, plus the row-sum degrees.
#[derive(Debug, Clone)]
pub struct SparseAffinity {
    pub n: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub degree: Vec<f64>,
}

/// Solver parameters; bandwidths are in Lab / normalized-depth units.
#[derive(Debug, Clone, Copy)]
pub struct PropagationParams {
    pub delta1: f64,
    pub delta2: f64,
    pub alpha: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            delta1: 20.0,
            delta2: 0.2,
            alpha: 0.99,
            cg_tol: 1e-8,
            cg_max_iter: 1000,
        }
    }
}

/// The assembled linear system: affinity, seed matrix and mixing weight.
#[derive(Debug, Clone)]
pub struct PropagationProblem {
    pub affinity: SparseAffinity,
    /// N x 2 seed indicator; rows are (1,0), (0,1) or (0,0).
    pub seeds: Vec<[f64; 2]>,
    pub alpha: f64,
}

/// Per-region scores in [0,1] with their per-pixel 8-bit rendering.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub region_scores: Vec<f64>,
    pub pixels: Vec<u8>,
}

impl SaliencyMap {
    /// Renders clamped region scores through the label map.
    pub fn from_scores(scores: Vec<f64>, seg: &Segmentation) -> SaliencyMap {
        let pixels = seg
            .labels
            .iter()
            .map(|&l| (255.0 * scores[l as usize].clamp(0.0, 1.0)).round() as u8)
            .collect();
        SaliencyMap {
            width: seg.width,
            height: seg.height,
            region_scores: scores,
            pixels,
        }
    }
}

/// Builds the two-hierarchy affinity: regions at adjacency distance 1 or 2
/// are coupled by `exp(-|c_i-c_j|^2 / 2 delta1^2) * exp(-|d_i-d_j|^2 / 2
/// delta2^2)`; the diagonal stays zero. A region with no support (only
/// possible in degenerate graphs) is connected to its nearest centroid.
pub fn build_affinity(
    stats: &RegionStats,
    adj: &[Vec<usize>],
    delta1: f64,
    delta2: f64,
) -> Result<SparseAffinity> {
    if delta1 <= 0.0 || delta2 <= 0.0 {
        return Err(Error::Config("affinity bandwidths must be positive".into()));
    }
    let n = stats.len();
    let weight = |i: usize, j: usize| -> f64 {
        let dc: f64 = (0..3)
            .map(|c| (stats.mean_lab[i][c] - stats.mean_lab[j][c]).powi(2))
            .sum();
        let dd = stats.mean_depth[i] - stats.mean_depth[j];
        (-dc / (2.0 * delta1 * delta1)).exp() * (-(dd * dd) / (2.0 * delta2 * delta2)).exp()
    };

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut support = BTreeSet::new();
        for &j in &adj[i] {
            support.insert(j);
            for &k in &adj[j] {
                if k != i {
                    support.insert(k);
                }
            }
        }
        if support.is_empty() && n > 1 {
            // nearest centroid fallback
            let mut nearest = usize::MAX;
            let mut best = f64::INFINITY;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dx = stats.centroid[i][0] - stats.centroid[j][0];
                let dy = stats.centroid[i][1] - stats.centroid[j][1];
                let d = dx * dx + dy * dy;
                if d < best {
                    best = d;
                    nearest = j;
                }
            }
            log::warn!("region {i} is isolated; connecting to nearest centroid {nearest}");
            support.insert(nearest);
        }
        rows.push(support.into_iter().map(|j| (j, weight(i, j))).collect());
    }

    // Symmetrize the support (the fallback may have added one-sided edges).
    let snapshot: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| r.iter().map(|&(j, _)| j).collect())
        .collect();
    for i in 0..n {
        for &j in &snapshot[i] {
            if snapshot[j].binary_search(&i).is_err() {
                let w = weight(i, j);
                let pos = rows[j].partition_point(|&(c, _)| c < i);
                rows[j].insert(pos, (i, w));
            }
        }
    }

    let degree = rows
        .iter()
        .map(|r| r.iter().map(|&(_, w)| w).sum())
        .collect();
    Ok(SparseAffinity { n, rows, degree })
}

/// Otsu's threshold over values in [0,1] on a 256-bin histogram.
///
/// Returns the smallest bin edge (k/256) maximizing the between-class
/// variance; the comparison is done in exact integer arithmetic so ties
/// break identically everywhere. A constant input returns that constant.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::DegenerateInput(
            "otsu needs at least 2 values".into(),
        ));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        log::warn!("otsu: constant input {lo}, threshold degenerate");
        return Ok(lo);
    }

    let mut hist = [0u64; 256];
    for &v in values {
        let bin = ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255);
        hist[bin] += 1;
    }
    let total: u64 = values.len() as u64;
    let total_sum: u64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u64 * c)
        .sum();

    // between-class variance at edge k, compared as exact fractions:
    // sigma_b^2(k) = (s0*w1 - s1*w0)^2 / (w0*w1)
    let mut best_k = 0usize;
    let mut best_num: u128 = 0;
    let mut best_den: u128 = 1;
    let mut w0: u64 = 0;
    let mut s0: u64 = 0;
    for k in 1..=255usize {
        w0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let s1 = total_sum - s0;
        let a = (s0 as i128 * w1 as i128 - s1 as i128 * w0 as i128).unsigned_abs();
        let num = a * a;
        let den = (w0 as u128) * (w1 as u128);
        // num/den > best_num/best_den, strictly: smallest maximizing edge wins
        if best_k == 0 || num * best_den > best_num * den {
            best_k = k;
            best_num = num;
            best_den = den;
        }
    }
    Ok(best_k as f64 / 256.0)
}

/// Seed class of one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Seed {
    Salient,
    NonSalient,
    None,
}

impl Seed {
    pub fn row(self) -> [f64; 2] {
        match self {
            Seed::Salient => [1.0, 0.0],
            Seed::NonSalient => [0.0, 1.0],
            Seed::None => [0.0, 0.0],
        }
    }
}

/// Otsu-thresholded seeding: salient where `p_sal` exceeds its threshold,
/// non-salient where `p_nonsal` exceeds its own; a region passing both takes
/// the class with the larger margin above its threshold.
pub fn seed_labels(p_sal: &[f64], p_nonsal: &[f64]) -> Result<Vec<Seed>> {
    if p_sal.len() != p_nonsal.len() {
        return Err(Error::Alignment(format!(
            "probability vectors differ: {} vs {}",
            p_sal.len(),
            p_nonsal.len()
        )));
    }
    let tau1 = otsu_threshold(p_sal)?;
    let tau2 = otsu_threshold(p_nonsal)?;
    let seeds: Vec<Seed> = p_sal
        .iter()
        .zip(p_nonsal)
        .map(|(&ps, &pn)| {
            let sal = ps > tau1;
            let non = pn > tau2;
            match (sal, non) {
                (true, false) => Seed::Salient,
                (false, true) => Seed::NonSalient,
                (true, true) => {
                    if ps - tau1 >= pn - tau2 {
                        Seed::Salient
                    } else {
                        Seed::NonSalient
                    }
                }
                (false, false) => Seed::None,
            }
        })
        .collect();
    if seeds.iter().all(|&s| s == Seed::None) {
        log::warn!("seeding produced no labeled region (degenerate probabilities)");
    }
    Ok(seeds)
}

pub fn seed_matrix(seeds: &[Seed]) -> Vec<[f64; 2]> {
    seeds.iter().map(|s| s.row()).collect()
}

struct NormalizedOperator<'a> {
    affinity: &'a SparseAffinity,
    alpha: f64,
    inv_sqrt_degree: Vec<f64>,
}

impl<'a> NormalizedOperator<'a> {
    fn new(affinity: &'a SparseAffinity, alpha: f64) -> Self {
        let inv_sqrt_degree = affinity
            .degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        NormalizedOperator {
            affinity,
            alpha,
            inv_sqrt_degree,
        }
    }

    /// y = (I - alpha * D^{-1/2} A D^{-1/2}) x
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.affinity.n {
            let mut s = 0.0;
            for &(j, w) in &self.affinity.rows[i] {
                s += w * self.inv_sqrt_degree[j] * x[j];
            }
            y[i] = x[i] - self.alpha * self.inv_sqrt_degree[i] * s;
        }
    }
}

/// Jacobi-preconditioned conjugate gradient for one right-hand side.
fn pcg(
    op: &NormalizedOperator,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    // diag(I - alpha*S) is identically 1 (zero affinity diagonal), but the
    // preconditioner is kept explicit.
    let diag = vec![1.0f64; n];

    let mut x = vec![0.0f64; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut q = vec![0.0f64; n];

    for iter in 0..max_iter {
        op.apply(&p, &mut q);
        let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let res = r.iter().map(|v| v * v).sum::<f64>().sqrt() / b_norm;
        if res <= tol {
            return Ok(x);
        }
        let _ = iter;
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = r.iter().map(|v| v * v).sum::<f64>().sqrt() / b_norm;
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: res,
    })
}

/// Solves `(I - alpha*S) F = Y` column by column.
pub fn solve_propagation(
    problem: &PropagationProblem,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<[f64; 2]>> {
    let n = problem.affinity.n;
    if problem.seeds.len() != n {
        return Err(Error::Alignment(format!(
            "seed matrix has {} rows, graph has {n}",
            problem.seeds.len()
        )));
    }
    if !(problem.alpha > 0.0 && problem.alpha < 1.0) {
        return Err(Error::Config("alpha must lie in (0,1)".into()));
    }
    let op = NormalizedOperator::new(&problem.affinity, problem.alpha);
    let mut f = vec![[0.0f64; 2]; n];
    for col in 0..2 {
        let b: Vec<f64> = problem.seeds.iter().map(|row| row[col]).collect();
        let x = pcg(&op, &b, tol, max_iter)?;
        for (fi, xi) in f.iter_mut().zip(x) {
            fi[col] = xi;
        }
    }
    Ok(f)
}

/// Reduces the two-column solution to per-region scores (salient minus
/// non-salient), min-max normalizes to [0,1], and renders per pixel. A
/// constant score vector renders as all zeros.
pub fn finalize_saliency(f: &[[f64; 2]], seg: &Segmentation) -> Result<SaliencyMap> {
    if f.len() != seg.n_regions {
        return Err(Error::Alignment(format!(
            "{} scores for {} regions",
            f.len(),
            seg.n_regions
        )));
    }
    let mut scores: Vec<f64> = f.iter().map(|row| row[0] - row[1]).collect();
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        scores.iter_mut().for_each(|s| *s = (*s - lo) / (hi - lo));
    } else {
        log::warn!("constant propagation output, saliency map degenerates to zeros");
        scores.iter_mut().for_each(|s| *s = 0.0);
    }
    Ok(SaliencyMap::from_scores(scores, seg))
}

/// Full propagation given per-region class probabilities.
pub fn propagate_probabilities(
    p_sal: &[f64],
    p_nonsal: &[f64],
    stats: &RegionStats,
    adj: &[Vec<usize>],
    seg: &Segmentation,
    params: &PropagationParams,
) -> Result<SaliencyMap> {
    let affinity = build_affinity(stats, adj, params.delta1, params.delta2)?;
    let seeds = seed_matrix(&seed_labels(p_sal, p_nonsal)?);
    let problem = PropagationProblem {
        affinity,
        seeds,
        alpha: params.alpha,
    };
    let f = solve_propagation(&problem, params.cg_tol, params.cg_max_iter)?;
    finalize_saliency(&f, seg)
}

/// Refines an arbitrary external per-pixel saliency map: segments the image,
/// averages the map per region as the salient probability, then runs the
/// standard seeding and propagation.
pub fn refine_external(
    map: &[f64],
    img: &RgbdImage,
    n_superpixels: usize,
    slic_compactness: f64,
    params: &PropagationParams,
) -> Result<SaliencyMap> {
    if map.len() != img.pixel_count() {
        return Err(Error::Alignment(format!(
            "external map has {} values, image has {} pixels",
            map.len(),
            img.pixel_count()
        )));
    }
    let seg = crate::superpixel::slic_segment(img, n_superpixels, slic_compactness)?;
    let stats = crate::superpixel::region_stats(&seg, img)?;
    let adj = crate::superpixel::adjacency(&seg);
    let mut p_sal = vec![0.0f64; seg.n_regions];
    let mut count = vec![0usize; seg.n_regions];
    for (idx, &l) in seg.labels.iter().enumerate() {
        p_sal[l as usize] += map[idx].clamp(0.0, 1.0);
        count[l as usize] += 1;
    }
    for (p, c) in p_sal.iter_mut().zip(&count) {
        *p /= *c as f64;
    }
    let p_nonsal: Vec<f64> = p_sal.iter().map(|p| 1.0 - p).collect();
    propagate_probabilities(&p_sal, &p_nonsal, &stats, &adj, &seg, params)
}

/// Debug dump: the affinity in Matrix Market coordinate format (symmetric,
/// lower triangle, 1-based).
pub fn write_affinity_matrix_market(path: &Path, affinity: &SparseAffinity) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "%%MatrixMarket matrix coordinate real symmetric")?;
    let nnz_lower: usize = affinity
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().filter(|&&(j, _)| j <= i).count())
        .sum();
    writeln!(out, "{} {} {}", affinity.n, affinity.n, nnz_lower)?;
    for (i, row) in affinity.rows.iter().enumerate() {
        for &(j, w) in row {
            if j <= i {
                writeln!(out, "{} {} {}", i + 1, j + 1, w)?;
            }
        }
    }
    Ok(())
}

/// Debug dump: per-region probabilities, seed class (1 salient, 2
/// non-salient, 0 unseeded) and final score as CSV.
pub fn write_seed_scores_csv(
    path: &Path,
    p_sal: &[f64],
    p_nonsal: &[f64],
    seeds: &[Seed],
    scores: &[f64],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "region,p_sal,p_nonsal,seed_class,score")?;
    for i in 0..p_sal.len() {
        let class = match seeds[i] {
            Seed::Salient => 1,
            Seed::NonSalient => 2,
            Seed::None => 0,
        };
        writeln!(
            out,
            "{i},{},{},{class},{}",
            p_sal[i], p_nonsal[i], scores[i]
        )?;
    }
    Ok(())
}
