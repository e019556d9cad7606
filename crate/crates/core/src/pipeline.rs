//! End-to-end wiring: segmentation, feature extraction, classification,
//! propagation, and image-level training.
//!
//! Training streams patches through a bounded seeded shuffle buffer instead
//! of materializing every patch of every image (a full epoch of packed
//! patches would run to gigabytes). Image order, augmentation draws and
//! dropout draws are all keyed on content hashes and stream positions, so
//! training is invariant to dataset ordering and bit-reproducible.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{extract_all, FeaturePatch};
use crate::imageio::RgbdImage;
use crate::nn::{self, EpochStats, Network};
use crate::propagate::{propagate_probabilities, SaliencyMap};
use crate::superpixel::{adjacency, boundary_regions, region_stats, slic_segment, RegionStats, Segmentation};

/// Segmentation, statistics and packed patches of one image.
pub struct Prepared {
    pub seg: Segmentation,
    pub stats: RegionStats,
    pub background: Vec<usize>,
    pub patches: Vec<FeaturePatch>,
}

/// Runs segmentation and feature extraction at pipeline dimensions.
pub fn prepare(img: &RgbdImage, config: &PipelineConfig) -> Result<Prepared> {
    let seg = slic_segment(img, config.n_superpixels, config.slic_compactness)?;
    let stats = region_stats(&seg, img)?;
    let background = boundary_regions(&seg, config.n_background);
    let patches = extract_all(img, &seg, &stats, &background, &config.feature_params())?;
    Ok(Prepared {
        seg,
        stats,
        background,
        patches,
    })
}

/// Per-region class probabilities from the network.
pub fn classify(net: &Network, patches: &[FeaturePatch]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p_sal = Vec::with_capacity(patches.len());
    let mut p_nonsal = Vec::with_capacity(patches.len());
    for patch in patches {
        let probs = net.forward(patch)?;
        p_sal.push(probs[nn::CLASS_SALIENT]);
        p_nonsal.push(probs[nn::CLASS_NON_SALIENT]);
    }
    Ok((p_sal, p_nonsal))
}

/// Result of a full inference pass over one image.
pub struct Inference {
    pub prepared: Prepared,
    pub p_sal: Vec<f64>,
    pub p_nonsal: Vec<f64>,
    /// Raw per-region CNN probability map (no propagation).
    pub init: SaliencyMap,
    /// Propagated map; absent when propagation was disabled.
    pub refined: Option<SaliencyMap>,
}

/// Segment, extract, classify and (optionally) propagate one image.
pub fn infer(
    img: &RgbdImage,
    net: &Network,
    config: &PipelineConfig,
    with_propagation: bool,
) -> Result<Inference> {
    config.validate_for_cnn()?;
    let prepared = prepare(img, config)?;
    let (p_sal, p_nonsal) = classify(net, &prepared.patches)?;
    let init = SaliencyMap::from_scores(p_sal.clone(), &prepared.seg);
    let refined = if with_propagation {
        let adj = adjacency(&prepared.seg);
        Some(propagate_probabilities(
            &p_sal,
            &p_nonsal,
            &prepared.stats,
            &adj,
            &prepared.seg,
            &config.propagation_params(),
        )?)
    } else {
        None
    };
    Ok(Inference {
        prepared,
        p_sal,
        p_nonsal,
        init,
        refined,
    })
}

fn content_hash(img: &RgbdImage) -> u64 {
    nn::hash_bytes(
        0x696d67,
        (img.width as u64)
            .to_le_bytes()
            .into_iter()
            .chain((img.height as u64).to_le_bytes())
            .chain(img.rgb.iter().flatten().flat_map(|v| v.to_le_bytes()))
            .chain(img.depth.iter().flat_map(|v| v.to_le_bytes()))
            .chain(img.gt.iter().flatten().copied()),
    )
}

const SHUFFLE_BUFFER_CAPACITY: usize = 8192;

struct TrainSink<'a> {
    net: &'a mut Network,
    velocity: &'a mut nn::Velocity,
    config: &'a nn::TrainConfig,
    lr: f64,
    epoch: usize,
    position: usize,
    batch: Vec<FeaturePatch>,
    loss_sum: f64,
    correct: usize,
    count: usize,
}

impl<'a> TrainSink<'a> {
    fn push(&mut self, patch: FeaturePatch) -> Result<()> {
        self.batch.push(patch);
        if self.batch.len() == self.config.batch_size {
            self.step()?;
        }
        Ok(())
    }

    fn step(&mut self) -> Result<()> {
        if self.batch.is_empty() {
            return Ok(());
        }
        let mut grad = nn::Gradients::zeros();
        let inv = 1.0 / self.batch.len() as f64;
        for patch in &self.batch {
            let salient = patch
                .label
                .ok_or_else(|| Error::Config("unlabeled patch during training".into()))?;
            let mut rng = nn::train_dropout_rng(self.config.seed, self.epoch, self.position);
            let mask = nn::DropoutMask::sample(&mut rng, self.config.dropout_keep);
            let (loss, ok) =
                nn::train_accumulate_sample(self.net, patch, salient, &mask, &mut grad, inv)?;
            self.loss_sum += loss;
            self.correct += ok as usize;
            self.count += 1;
            self.position += 1;
        }
        nn::sgd_step(
            self.net,
            &grad,
            self.velocity,
            self.lr,
            self.config.momentum,
            self.config.weight_decay,
        );
        self.batch.clear();
        Ok(())
    }
}

/// Trains the network on a dataset of ground-truth-labeled RGBD images.
///
/// `load` must deterministically produce image `i` on every call; images are
/// reloaded per epoch rather than held in memory. Pass `start` to resume
/// from existing weights.
pub fn train_on_dataset<F>(
    load: F,
    n_images: usize,
    config: &PipelineConfig,
    mut start: Option<Network>,
) -> Result<(Network, Vec<EpochStats>)>
where
    F: Fn(usize) -> Result<RgbdImage>,
{
    config.validate_for_cnn()?;
    if n_images == 0 {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let tc = &config.train;

    // content hashes drive a canonical, order-independent epoch schedule
    let mut hashes = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let img = load(i)?;
        if img.gt.is_none() {
            return Err(Error::Config(format!(
                "training image {i} has no ground truth"
            )));
        }
        hashes.push(content_hash(&img));
    }

    let mut net = start.take().unwrap_or_else(|| nn::init_weights(tc.seed));
    let mut velocity = nn::Velocity::zeros();
    let mut log = Vec::with_capacity(tc.epochs);
    let use_augment = tc.augment_flip || tc.augment_crop || tc.augment_jitter;

    for epoch in 0..tc.epochs {
        let lr = nn::learning_rate(tc, epoch);
        let mut order: Vec<usize> = (0..n_images).collect();
        order.sort_by_key(|&i| {
            (
                nn::hash_bytes(
                    tc.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15),
                    hashes[i].to_le_bytes(),
                ),
                hashes[i],
            )
        });

        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(nn::hash_bytes(
            tc.seed ^ 0x73687566,
            (epoch as u64).to_le_bytes(),
        ));
        let mut sink = TrainSink {
            net: &mut net,
            velocity: &mut velocity,
            config: tc,
            lr,
            epoch,
            position: 0,
            batch: Vec::with_capacity(tc.batch_size),
            loss_sum: 0.0,
            correct: 0,
            count: 0,
        };

        let mut buffer: Vec<FeaturePatch> = Vec::with_capacity(SHUFFLE_BUFFER_CAPACITY);
        for &idx in &order {
            let mut img = load(idx)?;
            if use_augment {
                let mut rng = ChaCha8Rng::seed_from_u64(nn::hash_bytes(
                    tc.seed ^ 0x617567,
                    (epoch as u64)
                        .to_le_bytes()
                        .into_iter()
                        .chain(hashes[idx].to_le_bytes()),
                ));
                img = nn::augment(
                    &img,
                    &mut rng,
                    tc.augment_flip,
                    tc.augment_crop,
                    tc.augment_jitter,
                );
            }
            let prepared = prepare(&img, config)?;
            for patch in prepared.patches {
                if buffer.len() < SHUFFLE_BUFFER_CAPACITY {
                    buffer.push(patch);
                } else {
                    let j = shuffle_rng.gen_range(0..buffer.len());
                    let evicted = std::mem::replace(&mut buffer[j], patch);
                    sink.push(evicted)?;
                }
            }
        }
        while !buffer.is_empty() {
            let j = shuffle_rng.gen_range(0..buffer.len());
            sink.push(buffer.swap_remove(j))?;
        }
        sink.step()?;

        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: sink.loss_sum / sink.count.max(1) as f64,
            train_accuracy: sink.correct as f64 / sink.count.max(1) as f64,
        };
        log::info!(
            "epoch {}: lr {:.6} loss {:.6} accuracy {:.4}",
            stats.epoch,
            stats.lr,
            stats.mean_loss,
            stats.train_accuracy
        );
        log.push(stats);
    }
    Ok((net, log))
}

/// One dataset record: aligned file paths sharing a stem.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub name: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: Option<PathBuf>,
}

impl DatasetEntry {
    pub fn load(&self) -> Result<RgbdImage> {
        crate::imageio::load_rgbd(&self.rgb, &self.depth, self.gt.as_deref())
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            names.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Scans a dataset root with `rgb/`, `depth/` and (optionally) `gt/`
/// subdirectories holding identically named PNGs. Name mismatches are
/// reported file by file.
pub fn scan_dataset(root: &Path, require_gt: bool) -> Result<Vec<DatasetEntry>> {
    let rgb_names = png_names(&root.join("rgb"))?;
    if rgb_names.is_empty() {
        return Err(Error::Config(format!(
            "no PNG images under {}",
            root.join("rgb").display()
        )));
    }
    let mut problems = Vec::new();
    let depth_names = png_names(&root.join("depth")).unwrap_or_default();
    let gt_names = if require_gt {
        png_names(&root.join("gt")).unwrap_or_default()
    } else {
        Vec::new()
    };
    for name in &rgb_names {
        if !depth_names.contains(name) {
            problems.push(format!("missing depth/{name}"));
        }
        if require_gt && !gt_names.contains(name) {
            problems.push(format!("missing gt/{name}"));
        }
    }
    for name in &depth_names {
        if !rgb_names.contains(name) {
            problems.push(format!("depth/{name} has no rgb counterpart"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} is inconsistent:\n  {}",
            root.display(),
            problems.join("\n  ")
        )));
    }
    Ok(rgb_names
        .into_iter()
        .map(|name| DatasetEntry {
            rgb: root.join("rgb").join(&name),
            depth: root.join("depth").join(&name),
            gt: if require_gt {
                Some(root.join("gt").join(&name))
            } else {
                let p = root.join("gt").join(&name);
                p.exists().then_some(p)
            },
            name,
        })
        .collect())
}
