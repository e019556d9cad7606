//! Per-region saliency feature vectors and CNN input packing.
//!
//! For each superpixel we record, against every other region: local and
//! global color contrast, local and global depth contrast, color
//! compactness, and color/depth contrast to the pseudo-background regions
//! along the image border. The seven vectors are packed into a fixed
//! 32x32x6 patch for the network.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::RgbdImage;
use crate::superpixel::{RegionStats, Segmentation};

/// Fixed capacity of the packed patch: region-indexed vectors.
pub const PATCH_REGIONS: usize = 1024;
/// Fixed capacity for pseudo-background vectors.
pub const PATCH_BACKGROUND: usize = 160;
pub const PATCH_SIDE: usize = 32;
pub const PATCH_CHANNELS: usize = 6;
/// Total values per patch (6 channel planes of 32x32).
pub const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE * PATCH_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Color,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Local,
    Global,
}

/// Bandwidths of the feature formulas.
#[derive(Debug, Clone, Copy)]
pub struct FeatureParams {
    /// Spatial bandwidth of local contrast, in normalized image coordinates.
    pub sigma_lr: f64,
    /// Spatial bandwidth of global contrast.
    pub sigma_gr: f64,
    /// Color bandwidth of the compactness weight, in Lab units.
    pub delta_c: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            sigma_lr: 0.15,
            sigma_gr: 0.45,
            delta_c: 20.0,
        }
    }
}

/// The seven raw feature vectors of one region, zero-padded to fixed length.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub region: usize,
    pub cl: Vec<f64>,
    pub cg: Vec<f64>,
    pub dl: Vec<f64>,
    pub dg: Vec<f64>,
    pub cs: Vec<f64>,
    pub cb: Vec<f64>,
    pub db: Vec<f64>,
}

/// A packed, per-channel min-max scaled CNN input patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePatch {
    pub region: usize,
    /// Channel-planar layout: plane `c` occupies `c*1024..(c+1)*1024`,
    /// row-major within each 32x32 plane. Values in [0,1].
    pub data: Vec<f32>,
    /// `Some(true)` salient, `Some(false)` non-salient, `None` unlabeled.
    pub label: Option<bool>,
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

fn spatial_weight(a: &[f64; 2], b: &[f64; 2], sigma: f64) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Contrast of region `i` against every region: entry j is
/// `t(j) * phi(i,j) * distance(i,j)`, with the spatial bandwidth picked by
/// `scope`. Entries past the real region count stay zero.
pub fn contrast_vector(
    i: usize,
    stats: &RegionStats,
    channel: Channel,
    scope: Scope,
    params: &FeatureParams,
    padded_len: usize,
) -> Result<Vec<f64>> {
    let n = stats.len();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, count: n });
    }
    debug_assert!(padded_len >= n);
    let sigma = match scope {
        Scope::Local => params.sigma_lr,
        Scope::Global => params.sigma_gr,
    };
    let mut out = vec![0.0; padded_len];
    for j in 0..n {
        if j == i {
            continue;
        }
        let dist = match channel {
            Channel::Color => color_distance(&stats.mean_lab[i], &stats.mean_lab[j]),
            Channel::Depth => (stats.mean_depth[i] - stats.mean_depth[j]).abs(),
        };
        out[j] = stats.weight[j] * spatial_weight(&stats.centroid[i], &stats.centroid[j], sigma) * dist;
    }
    Ok(out)
}

/// Color compactness of region `i`: entry j is the color similarity
/// `phi(c_i,c_j)` times the distance of region j to the similarity-weighted
/// mean position of color `c_i`.
pub fn compactness_vector(
    i: usize,
    stats: &RegionStats,
    params: &FeatureParams,
    padded_len: usize,
) -> Result<Vec<f64>> {
    let n = stats.len();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, count: n });
    }
    let two_d2 = 2.0 * params.delta_c * params.delta_c;
    let sim: Vec<f64> = (0..n)
        .map(|j| {
            let d = color_distance(&stats.mean_lab[i], &stats.mean_lab[j]);
            (-(d * d) / two_d2).exp()
        })
        .collect();
    let norm: f64 = sim.iter().sum();
    let mut u = [0.0f64; 2];
    for j in 0..n {
        u[0] += sim[j] * stats.centroid[j][0];
        u[1] += sim[j] * stats.centroid[j][1];
    }
    u[0] /= norm;
    u[1] /= norm;
    let mut out = vec![0.0; padded_len];
    for j in 0..n {
        let dx = stats.centroid[j][0] - u[0];
        let dy = stats.centroid[j][1] - u[1];
        out[j] = sim[j] * (dx * dx + dy * dy).sqrt();
    }
    Ok(out)
}

/// Contrast of region `i` to the pseudo-background regions, with the global
/// spatial bandwidth. Slot k corresponds to `bg[k]`; missing slots stay zero.
pub fn background_vector(
    i: usize,
    stats: &RegionStats,
    bg: &[usize],
    channel: Channel,
    params: &FeatureParams,
    padded_len: usize,
) -> Result<Vec<f64>> {
    let n = stats.len();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, count: n });
    }
    if bg.len() > padded_len {
        return Err(Error::Shape(format!(
            "{} background regions exceed capacity {padded_len}",
            bg.len()
        )));
    }
    let mut out = vec![0.0; padded_len];
    for (k, &b) in bg.iter().enumerate() {
        if b >= n {
            return Err(Error::IndexOutOfRange { index: b, count: n });
        }
        if b == i {
            continue;
        }
        let dist = match channel {
            Channel::Color => color_distance(&stats.mean_lab[i], &stats.mean_lab[b]),
            Channel::Depth => (stats.mean_depth[i] - stats.mean_depth[b]).abs(),
        };
        out[k] = stats.weight[b]
            * spatial_weight(&stats.centroid[i], &stats.centroid[b], params.sigma_gr)
            * dist;
    }
    Ok(out)
}

/// Computes all seven vectors of one region at pipeline dimensions.
///
/// Evaluates each spatial/color weight once and reuses it across channels;
/// the arithmetic matches the standalone vector functions expression for
/// expression, so results are identical.
pub fn compute_feature_set(
    i: usize,
    stats: &RegionStats,
    bg: &[usize],
    params: &FeatureParams,
) -> Result<FeatureSet> {
    let n = stats.len();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, count: n });
    }
    if bg.len() > PATCH_BACKGROUND {
        return Err(Error::Shape(format!(
            "{} background regions exceed capacity {PATCH_BACKGROUND}",
            bg.len()
        )));
    }
    debug_assert!(n <= PATCH_REGIONS);

    let mut cdist = vec![0.0f64; n];
    let mut ddist = vec![0.0f64; n];
    let mut w_local = vec![0.0f64; n];
    let mut w_global = vec![0.0f64; n];
    for j in 0..n {
        cdist[j] = color_distance(&stats.mean_lab[i], &stats.mean_lab[j]);
        ddist[j] = (stats.mean_depth[i] - stats.mean_depth[j]).abs();
        w_local[j] = spatial_weight(&stats.centroid[i], &stats.centroid[j], params.sigma_lr);
        w_global[j] = spatial_weight(&stats.centroid[i], &stats.centroid[j], params.sigma_gr);
    }

    let mut cl = vec![0.0f64; PATCH_REGIONS];
    let mut cg = vec![0.0f64; PATCH_REGIONS];
    let mut dl = vec![0.0f64; PATCH_REGIONS];
    let mut dg = vec![0.0f64; PATCH_REGIONS];
    for j in 0..n {
        if j == i {
            continue;
        }
        cl[j] = stats.weight[j] * w_local[j] * cdist[j];
        cg[j] = stats.weight[j] * w_global[j] * cdist[j];
        dl[j] = stats.weight[j] * w_local[j] * ddist[j];
        dg[j] = stats.weight[j] * w_global[j] * ddist[j];
    }

    // compactness reuses the color distances
    let two_d2 = 2.0 * params.delta_c * params.delta_c;
    let sim: Vec<f64> = cdist.iter().map(|d| (-(d * d) / two_d2).exp()).collect();
    let norm: f64 = sim.iter().sum();
    let mut u = [0.0f64; 2];
    for j in 0..n {
        u[0] += sim[j] * stats.centroid[j][0];
        u[1] += sim[j] * stats.centroid[j][1];
    }
    u[0] /= norm;
    u[1] /= norm;
    let mut cs = vec![0.0f64; PATCH_REGIONS];
    for j in 0..n {
        let dx = stats.centroid[j][0] - u[0];
        let dy = stats.centroid[j][1] - u[1];
        cs[j] = sim[j] * (dx * dx + dy * dy).sqrt();
    }

    let mut cb = vec![0.0f64; PATCH_BACKGROUND];
    let mut db = vec![0.0f64; PATCH_BACKGROUND];
    for (k, &b) in bg.iter().enumerate() {
        if b >= n {
            return Err(Error::IndexOutOfRange { index: b, count: n });
        }
        if b == i {
            continue;
        }
        cb[k] = stats.weight[b] * w_global[b] * cdist[b];
        db[k] = stats.weight[b] * w_global[b] * ddist[b];
    }

    Ok(FeatureSet {
        region: i,
        cl,
        cg,
        dl,
        dg,
        cs,
        cb,
        db,
    })
}

/// Packs the seven vectors into 6 unscaled channel planes.
///
/// Channels 0-4 are the five region-indexed vectors reshaped row-major;
/// channel 5 is the color-background half (zero-padded to 512) followed by
/// the depth-background half.
pub fn pack_raw(fs: &FeatureSet) -> Result<Vec<f64>> {
    for (name, v) in [
        ("cl", &fs.cl),
        ("cg", &fs.cg),
        ("dl", &fs.dl),
        ("dg", &fs.dg),
        ("cs", &fs.cs),
    ] {
        if v.len() != PATCH_REGIONS {
            return Err(Error::Shape(format!(
                "{name} has length {}, expected {PATCH_REGIONS}",
                v.len()
            )));
        }
    }
    for (name, v) in [("cb", &fs.cb), ("db", &fs.db)] {
        if v.len() != PATCH_BACKGROUND {
            return Err(Error::Shape(format!(
                "{name} has length {}, expected {PATCH_BACKGROUND}",
                v.len()
            )));
        }
    }
    let mut planes = vec![0.0f64; PATCH_LEN];
    let half = PATCH_REGIONS / 2;
    for (c, v) in [&fs.cl, &fs.cg, &fs.dl, &fs.dg, &fs.cs].iter().enumerate() {
        planes[c * PATCH_REGIONS..(c + 1) * PATCH_REGIONS].copy_from_slice(v);
    }
    let ch6 = &mut planes[5 * PATCH_REGIONS..];
    ch6[..PATCH_BACKGROUND].copy_from_slice(&fs.cb);
    ch6[half..half + PATCH_BACKGROUND].copy_from_slice(&fs.db);
    Ok(planes)
}

/// Recovers the seven raw vectors from unscaled planes (inverse of
/// `pack_raw` on the populated slots).
pub fn unpack_raw(planes: &[f64], region: usize) -> FeatureSet {
    assert_eq!(planes.len(), PATCH_LEN);
    let take = |c: usize| planes[c * PATCH_REGIONS..(c + 1) * PATCH_REGIONS].to_vec();
    let ch6 = &planes[5 * PATCH_REGIONS..];
    let half = PATCH_REGIONS / 2;
    FeatureSet {
        region,
        cl: take(0),
        cg: take(1),
        dl: take(2),
        dg: take(3),
        cs: take(4),
        cb: ch6[..PATCH_BACKGROUND].to_vec(),
        db: ch6[half..half + PATCH_BACKGROUND].to_vec(),
    }
}

/// Min-max scales each channel plane independently to [0,1]; a constant
/// plane becomes all zeros.
pub fn scale_planes(planes: &[f64]) -> Vec<f32> {
    assert_eq!(planes.len(), PATCH_LEN);
    let mut data = vec![0.0f32; PATCH_LEN];
    for c in 0..PATCH_CHANNELS {
        let plane = &planes[c * PATCH_REGIONS..(c + 1) * PATCH_REGIONS];
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            for (d, &v) in data[c * PATCH_REGIONS..(c + 1) * PATCH_REGIONS]
                .iter_mut()
                .zip(plane)
            {
                *d = ((v - lo) / range) as f32;
            }
        }
    }
    data
}

/// Packs one region's feature set into the scaled CNN input patch.
pub fn pack_patch(fs: &FeatureSet) -> Result<FeaturePatch> {
    let planes = pack_raw(fs)?;
    Ok(FeaturePatch {
        region: fs.region,
        data: scale_planes(&planes),
        label: None,
    })
}

/// Extracts one labeled patch per region of a segmented image.
///
/// With ground truth present, a region is labeled salient when more than
/// half of its pixels are salient.
pub fn extract_all(
    img: &RgbdImage,
    seg: &Segmentation,
    stats: &RegionStats,
    bg: &[usize],
    params: &FeatureParams,
) -> Result<Vec<FeaturePatch>> {
    if seg.n_regions > PATCH_REGIONS {
        return Err(Error::Shape(format!(
            "{} regions exceed patch capacity {PATCH_REGIONS}",
            seg.n_regions
        )));
    }
    let labels = img.gt.as_ref().map(|gt| {
        let mut salient = vec![0usize; seg.n_regions];
        let mut total = vec![0usize; seg.n_regions];
        for (idx, &l) in seg.labels.iter().enumerate() {
            total[l as usize] += 1;
            salient[l as usize] += gt[idx] as usize;
        }
        (0..seg.n_regions)
            .map(|r| 2 * salient[r] > total[r])
            .collect::<Vec<bool>>()
    });
    let mut patches = Vec::with_capacity(seg.n_regions);
    for i in 0..seg.n_regions {
        let fs = compute_feature_set(i, stats, bg, params)?;
        let mut patch = pack_patch(&fs)?;
        patch.label = labels.as_ref().map(|l| l[i]);
        patches.push(patch);
    }
    Ok(patches)
}

const LABEL_SALIENT: u8 = 1;
const LABEL_NON_SALIENT: u8 = 0;
const LABEL_NONE: u8 = 255;

/// Writes patches as binary records: region id (u32 LE), 6144 f32 LE values,
/// one label byte (0 / 1 / 255 = unlabeled).
pub fn write_feature_dump(path: &Path, patches: &[FeaturePatch]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in patches {
        out.write_all(&(p.region as u32).to_le_bytes())?;
        for &v in &p.data {
            out.write_all(&v.to_le_bytes())?;
        }
        let label = match p.label {
            Some(true) => LABEL_SALIENT,
            Some(false) => LABEL_NON_SALIENT,
            None => LABEL_NONE,
        };
        out.write_all(&[label])?;
    }
    Ok(())
}

/// Reads a feature dump written by [`write_feature_dump`].
pub fn read_feature_dump(path: &Path) -> Result<Vec<FeaturePatch>> {
    let bytes = std::fs::read(path)?;
    let record = 4 + PATCH_LEN * 4 + 1;
    if bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "feature dump length {} is not a multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let mut patches = Vec::with_capacity(bytes.len() / record);
    let mut cur = &bytes[..];
    while !cur.is_empty() {
        let mut id = [0u8; 4];
        cur.read_exact(&mut id)?;
        let mut data = Vec::with_capacity(PATCH_LEN);
        for _ in 0..PATCH_LEN {
            let mut v = [0u8; 4];
            cur.read_exact(&mut v)?;
            data.push(f32::from_le_bytes(v));
        }
        let mut label = [0u8; 1];
        cur.read_exact(&mut label)?;
        let label = match label[0] {
            LABEL_SALIENT => Some(true),
            LABEL_NON_SALIENT => Some(false),
            LABEL_NONE => None,
            other => {
                return Err(Error::Format(format!("invalid label byte {other}")));
            }
        };
        patches.push(FeaturePatch {
            region: u32::from_le_bytes(id) as usize,
            data,
            label,
        });
    }
    Ok(patches)
}
