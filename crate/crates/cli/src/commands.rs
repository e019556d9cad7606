use std::path::Path;

use rsdf_core::error::{Error, Result};
use rsdf_core::eval::{evaluate, pr_curve, write_pr_csv, write_summary_csv};
use rsdf_core::imageio::{
    load_rgbd, read_gray_png, read_mask_png, write_gray8_png,
};
use rsdf_core::nn::{self, Network};
use rsdf_core::pipeline::{self, scan_dataset, DatasetEntry};
use rsdf_core::propagate::{self, refine_external};
use rsdf_core::superpixel;
use rsdf_core::synth::{generate_dataset, SynthParams};
use rsdf_core::PipelineConfig;

use crate::{EvalArgs, InferArgs, RefineArgs, SegmentArgs, SynthArgs, TrainArgs};

fn echo_config(config: &PipelineConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    config.write_json(&dir.join("config.json"))
}

pub fn train(args: &TrainArgs, mut config: PipelineConfig) -> Result<()> {
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.lr_start {
        config.train.lr_start = v;
    }
    if let Some(v) = args.lr_end {
        config.train.lr_end = v;
    }
    if let Some(v) = args.dropout_keep {
        config.train.dropout_keep = v;
    }
    if let Some(v) = args.weight_decay {
        config.train.weight_decay = v;
    }
    if args.no_augment {
        config.train.augment_flip = false;
        config.train.augment_crop = false;
        config.train.augment_jitter = false;
    }
    config.dataset = Some(args.dataset.clone());
    config.output = Some(args.out.clone());
    config.validate_for_cnn()?;

    let entries = scan_dataset(&args.dataset, true)?;
    log::info!("training on {} images from {}", entries.len(), args.dataset.display());
    echo_config(&config, &args.out)?;

    let model_path = args.out.join("model.bin");
    let start = if args.resume {
        if !model_path.exists() {
            return Err(Error::Config(format!(
                "--resume given but {} does not exist",
                model_path.display()
            )));
        }
        Some(nn::load_model(&model_path)?)
    } else {
        None
    };

    let (net, log) =
        pipeline::train_on_dataset(|i| entries[i].load(), entries.len(), &config, start)?;
    nn::save_model(&net, &model_path)?;
    nn::write_loss_log(&args.out.join("loss_log.csv"), &log, args.resume)?;
    log::info!("model written to {}", model_path.display());
    Ok(())
}

fn infer_one(
    entry_name: &str,
    img: &rsdf_core::imageio::RgbdImage,
    net: &Network,
    config: &PipelineConfig,
    args: &InferArgs,
    out_path: &Path,
) -> Result<()> {
    let with_propagation = !args.no_propagation;
    let result = pipeline::infer(img, net, config, with_propagation)?;
    let final_map = result.refined.as_ref().unwrap_or(&result.init);
    write_gray8_png(out_path, final_map.width, final_map.height, &final_map.pixels)?;
    if args.save_init && with_propagation {
        let stem = out_path.file_stem().unwrap_or_default().to_string_lossy();
        let init_path = out_path.with_file_name(format!("{stem}_init.png"));
        write_gray8_png(&init_path, result.init.width, result.init.height, &result.init.pixels)?;
    }
    if let Some(path) = &args.dump_features {
        rsdf_core::features::write_feature_dump(path, &result.prepared.patches)?;
    }
    if args.dump_affinity.is_some() || args.dump_seeds.is_some() {
        let adj = superpixel::adjacency(&result.prepared.seg);
        let params = config.propagation_params();
        let affinity =
            propagate::build_affinity(&result.prepared.stats, &adj, params.delta1, params.delta2)?;
        let seeds = propagate::seed_labels(&result.p_sal, &result.p_nonsal)?;
        if let Some(path) = &args.dump_affinity {
            propagate::write_affinity_matrix_market(path, &affinity)?;
        }
        if let Some(path) = &args.dump_seeds {
            propagate::write_seed_scores_csv(
                path,
                &result.p_sal,
                &result.p_nonsal,
                &seeds,
                &final_map.region_scores,
            )?;
        }
    }
    log::info!("{entry_name}: wrote {}", out_path.display());
    Ok(())
}

pub fn infer(args: &InferArgs, config: PipelineConfig, jobs: usize) -> Result<()> {
    config.validate_for_cnn()?;
    let net = nn::load_model(&args.model)?;

    match (&args.rgb, &args.depth, &args.out, &args.dataset, &args.out_dir) {
        (Some(rgb), Some(depth), Some(out), None, None) => {
            let img = load_rgbd(rgb, depth, None)?;
            infer_one(&rgb.display().to_string(), &img, &net, &config, args, out)
        }
        (None, None, None, Some(dataset), Some(out_dir)) => {
            let entries = scan_dataset(dataset, false)?;
            std::fs::create_dir_all(out_dir)?;
            echo_config(&config, out_dir)?;
            run_parallel(jobs, &entries, |entry| {
                let img = entry.load()?;
                infer_one(
                    &entry.name,
                    &img,
                    &net,
                    &config,
                    args,
                    &out_dir.join(&entry.name),
                )
            })
        }
        _ => Err(Error::Config(
            "use either --rgb/--depth/--out or --dataset/--out-dir".into(),
        )),
    }
}

/// Runs one job per dataset entry on up to `jobs` threads. Each job writes
/// its own files, so outputs are identical at any thread count.
fn run_parallel<F>(jobs: usize, entries: &[DatasetEntry], job: F) -> Result<()>
where
    F: Fn(&DatasetEntry) -> Result<()> + Sync,
{
    if jobs <= 1 || entries.len() <= 1 {
        for entry in entries {
            job(entry)?;
        }
        return Ok(());
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let failure = std::sync::Mutex::new(None::<Error>);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(entries.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= entries.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                if let Err(e) = job(&entries[i]) {
                    *failure.lock().unwrap() = Some(e);
                    break;
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn refine(args: &RefineArgs, config: PipelineConfig) -> Result<()> {
    config.validate()?;
    let img = load_rgbd(&args.rgb, &args.depth, None)?;
    let (mw, mh, raw) = read_gray_png(&args.map)?;
    if (mw, mh) != (img.width, img.height) {
        return Err(Error::Alignment(format!(
            "map {}x{} does not match image {}x{}",
            mw, mh, img.width, img.height
        )));
    }
    let max = raw.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let map: Vec<f64> = raw.iter().map(|&v| v / max).collect();
    let refined = refine_external(
        &map,
        &img,
        config.n_superpixels,
        config.slic_compactness,
        &config.propagation_params(),
    )?;
    write_gray8_png(&args.out, refined.width, refined.height, &refined.pixels)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

pub fn eval(args: &EvalArgs, config: PipelineConfig) -> Result<()> {
    let pred_names = png_dir_names(&args.pred)?;
    let gt_names = png_dir_names(&args.gt)?;
    let missing_pred: Vec<&String> = gt_names.iter().filter(|n| !pred_names.contains(n)).collect();
    let missing_gt: Vec<&String> = pred_names.iter().filter(|n| !gt_names.contains(n)).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut msg = String::from("prediction and ground-truth sets differ:");
        for n in missing_pred {
            msg.push_str(&format!("\n  missing prediction for {n}"));
        }
        for n in missing_gt {
            msg.push_str(&format!("\n  missing ground truth for {n}"));
        }
        return Err(Error::Config(msg));
    }

    let mut maps: Vec<Vec<u8>> = Vec::with_capacity(pred_names.len());
    let mut gts: Vec<Vec<u8>> = Vec::with_capacity(pred_names.len());
    for name in &gt_names {
        let (pw, ph, praw) = read_gray_png(&args.pred.join(name))?;
        let (gw, gh, gt) = read_mask_png(&args.gt.join(name))?;
        if (pw, ph) != (gw, gh) {
            return Err(Error::Alignment(format!(
                "{name}: prediction {pw}x{ph} vs ground truth {gw}x{gh}"
            )));
        }
        maps.push(praw.iter().map(|&v| v.min(255.0) as u8).collect());
        gts.push(gt);
    }
    let map_refs: Vec<&[u8]> = maps.iter().map(|m| m.as_slice()).collect();
    let gt_refs: Vec<&[u8]> = gts.iter().map(|g| g.as_slice()).collect();
    let curve = pr_curve(&map_refs, &gt_refs)?;
    let summary = evaluate(&map_refs, &gt_refs)?;

    std::fs::create_dir_all(&args.out)?;
    echo_config(&config, &args.out)?;
    write_pr_csv(&args.out.join("curve.csv"), &curve)?;
    write_summary_csv(&args.out.join("summary.csv"), &args.name, &summary)?;
    log::info!(
        "{}: n={} F={:.4} P={:.4} R={:.4}",
        args.name,
        summary.n_images,
        summary.f_measure,
        summary.mean_precision,
        summary.mean_recall
    );
    Ok(())
}

fn png_dir_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in
        std::fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            names.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no PNG files in {}",
            dir.display()
        )));
    }
    names.sort();
    Ok(names)
}

pub fn synth(args: &SynthArgs, config: PipelineConfig) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("need at least one image".into()));
    }
    let params = SynthParams {
        width: args.width,
        height: args.height,
        ..SynthParams::default()
    };
    std::fs::create_dir_all(&args.out)?;
    echo_config(&config, &args.out)?;
    let names = generate_dataset(&args.out, args.count, config.seed, &params)?;
    log::info!("wrote {} synthetic images under {}", names.len(), args.out.display());
    Ok(())
}

pub fn segment(args: &SegmentArgs, config: PipelineConfig) -> Result<()> {
    let img = load_rgbd(&args.rgb, &args.depth, None)?;
    let seg = superpixel::slic_segment(&img, args.superpixels, config.slic_compactness)?;
    superpixel::write_label_map(&args.out_labels, &seg)?;
    if let Some(stats_path) = &args.out_stats {
        let stats = superpixel::region_stats(&seg, &img)?;
        superpixel::write_region_stats_csv(stats_path, &stats)?;
    }
    log::info!(
        "{} regions, labels written to {}",
        seg.n_regions,
        args.out_labels.display()
    );
    Ok(())
}
