//! Integration tests driving the `rsdf` binary end to end on small inputs.

use std::path::Path;
use std::process::{Command, Output};

fn rsdf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsdf"))
        .args(args)
        .current_dir(dir)
        .env("RSDF_LOG", "error")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(&["--seed", "9", "synth", "--out", "a", "-n", "2"], dir.path()));
    assert_ok(&rsdf(&["--seed", "9", "synth", "--out", "b", "-n", "2"], dir.path()));
    for sub in ["rgb", "depth", "gt"] {
        for name in ["00000.png", "00001.png"] {
            assert_eq!(
                read(&dir.path().join("a").join(sub).join(name)),
                read(&dir.path().join("b").join(sub).join(name)),
                "{sub}/{name} differs between identical runs"
            );
        }
    }
    // different seed differs
    assert_ok(&rsdf(&["--seed", "10", "synth", "--out", "c", "-n", "2"], dir.path()));
    assert_ne!(
        read(&dir.path().join("a/rgb/00000.png")),
        read(&dir.path().join("c/rgb/00000.png"))
    );
}

#[test]
fn segment_writes_labels_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(
        &["--seed", "4", "synth", "--out", "ds", "-n", "1", "--width", "48", "--height", "48"],
        dir.path(),
    ));
    assert_ok(&rsdf(
        &[
            "segment",
            "--rgb",
            "ds/rgb/00000.png",
            "--depth",
            "ds/depth/00000.png",
            "-n",
            "80",
            "--out-labels",
            "labels.png",
            "--out-stats",
            "stats.csv",
        ],
        dir.path(),
    ));
    let (w, h, labels) = rsdf_core::imageio::read_gray_png(&dir.path().join("labels.png")).unwrap();
    assert_eq!((w, h), (48, 48));
    let n = labels.iter().cloned().fold(0.0, f64::max) as usize + 1;
    assert!((64..=96).contains(&n), "region count {n} far from target 80");
    let stats = std::fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    assert!(stats.starts_with("index,L,a,b,depth,cx,cy,weight"));
    assert_eq!(stats.lines().count(), n + 1);
}

#[test]
fn eval_scores_ground_truth_at_one_and_reports_name_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(&["--seed", "4", "synth", "--out", "ds", "-n", "2"], dir.path()));
    assert_ok(&rsdf(
        &["eval", "--pred", "ds/gt", "--gt", "ds/gt", "--out", "scores", "--name", "self"],
        dir.path(),
    ));
    let summary = std::fs::read_to_string(dir.path().join("scores/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("self,2,1,1,1"));

    // remove one prediction: exit 2 with the name in the report
    std::fs::create_dir(dir.path().join("partial")).unwrap();
    std::fs::copy(
        dir.path().join("ds/gt/00000.png"),
        dir.path().join("partial/00000.png"),
    )
    .unwrap();
    let out = rsdf(
        &["eval", "--pred", "partial", "--gt", "ds/gt", "--out", "scores2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("00001.png"), "missing file not reported: {stderr}");
}

#[test]
fn refine_recovers_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(&["--seed", "12", "synth", "--out", "ds", "-n", "1"], dir.path()));
    assert_ok(&rsdf(
        &[
            "refine",
            "--map",
            "ds/gt/00000.png",
            "--rgb",
            "ds/rgb/00000.png",
            "--depth",
            "ds/depth/00000.png",
            "--out",
            "refined.png",
        ],
        dir.path(),
    ));
    let (_, _, refined) = rsdf_core::imageio::read_gray_png(&dir.path().join("refined.png")).unwrap();
    let (_, _, gt) = rsdf_core::imageio::read_mask_png(&dir.path().join("ds/gt/00000.png")).unwrap();
    let agree = refined
        .iter()
        .zip(&gt)
        .filter(|(&r, &g)| (r >= 128.0) == (g == 1))
        .count();
    assert!(
        agree as f64 / gt.len() as f64 > 0.97,
        "only {agree}/{} pixels recovered",
        gt.len()
    );
}

#[test]
fn refine_dimension_mismatch_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(&["--seed", "4", "synth", "--out", "a", "-n", "1"], dir.path()));
    assert_ok(&rsdf(
        &["--seed", "4", "synth", "--out", "b", "-n", "1", "--width", "32", "--height", "32"],
        dir.path(),
    ));
    let out = rsdf(
        &[
            "refine",
            "--map",
            "b/gt/00000.png",
            "--rgb",
            "a/rgb/00000.png",
            "--depth",
            "a/depth/00000.png",
            "--out",
            "x.png",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infer_is_deterministic_and_validates_the_model() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(
        &["--seed", "4", "synth", "--out", "ds", "-n", "1", "--width", "32", "--height", "32"],
        dir.path(),
    ));
    // an untrained model exercises the full inference path
    let net = rsdf_core::nn::init_weights(7);
    rsdf_core::nn::save_model(&net, &dir.path().join("model.bin")).unwrap();

    for run in ["one.png", "two.png"] {
        assert_ok(&rsdf(
            &[
                "infer",
                "--model",
                "model.bin",
                "--rgb",
                "ds/rgb/00000.png",
                "--depth",
                "ds/depth/00000.png",
                "--out",
                run,
                "--save-init",
            ],
            dir.path(),
        ));
    }
    assert_eq!(
        read(&dir.path().join("one.png")),
        read(&dir.path().join("two.png")),
        "identical runs must produce identical bytes"
    );
    assert!(dir.path().join("one_init.png").exists());

    // corrupted model: exit 3
    let mut bytes = read(&dir.path().join("model.bin"));
    bytes.truncate(bytes.len() / 3);
    std::fs::write(dir.path().join("bad.bin"), &bytes).unwrap();
    let out = rsdf(
        &[
            "infer",
            "--model",
            "bad.bin",
            "--rgb",
            "ds/rgb/00000.png",
            "--depth",
            "ds/depth/00000.png",
            "--out",
            "x.png",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn infer_writes_debug_dumps() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(
        &["--seed", "6", "synth", "--out", "ds", "-n", "1", "--width", "32", "--height", "32"],
        dir.path(),
    ));
    let net = rsdf_core::nn::init_weights(7);
    rsdf_core::nn::save_model(&net, &dir.path().join("model.bin")).unwrap();
    assert_ok(&rsdf(
        &[
            "infer",
            "--model",
            "model.bin",
            "--rgb",
            "ds/rgb/00000.png",
            "--depth",
            "ds/depth/00000.png",
            "--out",
            "map.png",
            "--dump-features",
            "features.bin",
            "--dump-affinity",
            "affinity.mtx",
            "--dump-seeds",
            "seeds.csv",
        ],
        dir.path(),
    ));
    let patches = rsdf_core::features::read_feature_dump(&dir.path().join("features.bin")).unwrap();
    assert!(!patches.is_empty());
    assert!(patches.iter().all(|p| p.label.is_none()));
    let mtx = std::fs::read_to_string(dir.path().join("affinity.mtx")).unwrap();
    assert!(mtx.starts_with("%%MatrixMarket"));
    let seeds = std::fs::read_to_string(dir.path().join("seeds.csv")).unwrap();
    assert!(seeds.starts_with("region,p_sal,p_nonsal,seed_class,score"));
}

#[test]
fn train_rejects_broken_datasets() {
    let dir = tempfile::tempdir().unwrap();
    // nonexistent root
    let out = rsdf(
        &["train", "--dataset", "nope", "--out", "out"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // missing depth file
    assert_ok(&rsdf(&["--seed", "4", "synth", "--out", "ds", "-n", "2"], dir.path()));
    std::fs::remove_file(dir.path().join("ds/depth/00001.png")).unwrap();
    let out = rsdf(
        &["train", "--dataset", "ds", "--out", "out"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("00001.png"), "{stderr}");
}

#[test]
fn train_and_resume_append_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(
        &["--seed", "8", "synth", "--out", "ds", "-n", "2", "--width", "20", "--height", "20"],
        dir.path(),
    ));
    let train_args = [
        "--seed", "8", "train", "--dataset", "ds", "--out", "run",
        "--epochs", "1", "--batch-size", "32",
        "--lr-start", "0.05", "--lr-end", "0.05",
        "--dropout-keep", "1.0", "--weight-decay", "0", "--no-augment",
    ];
    assert_ok(&rsdf(&train_args, dir.path()));
    let model_before = read(&dir.path().join("run/model.bin"));
    let log = std::fs::read_to_string(dir.path().join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "header plus one epoch");

    let mut resume_args = train_args.to_vec();
    resume_args.push("--resume");
    assert_ok(&rsdf(&resume_args, dir.path()));
    let model_after = read(&dir.path().join("run/model.bin"));
    assert_ne!(model_before, model_after, "resumed training must move weights");
    let log = std::fs::read_to_string(dir.path().join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "resume appends the log");

    // resume without an existing model is an input error
    let out = rsdf(
        &["train", "--dataset", "ds", "--out", "fresh", "--resume"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn jobs_flag_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(
        &["--seed", "3", "synth", "--out", "ds", "-n", "3", "--width", "24", "--height", "24"],
        dir.path(),
    ));
    let net = rsdf_core::nn::init_weights(1);
    rsdf_core::nn::save_model(&net, &dir.path().join("model.bin")).unwrap();
    for (jobs, out) in [("1", "p1"), ("3", "p3")] {
        assert_ok(&rsdf(
            &[
                "--jobs", jobs,
                "infer", "--model", "model.bin", "--dataset", "ds", "--out-dir", out,
            ],
            dir.path(),
        ));
    }
    for i in 0..3 {
        let name = format!("{i:05}.png");
        assert_eq!(
            read(&dir.path().join("p1").join(&name)),
            read(&dir.path().join("p3").join(&name)),
            "{name} differs between job counts"
        );
    }
}

#[test]
fn config_file_round_trip_reproduces_results() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rsdf(&["--seed", "21", "synth", "--out", "a", "-n", "1"], dir.path()));
    // the echoed config reproduces the dataset bit for bit
    assert_ok(&rsdf(
        &["--config", "a/config.json", "synth", "--out", "b", "-n", "1"],
        dir.path(),
    ));
    assert_eq!(
        read(&dir.path().join("a/rgb/00000.png")),
        read(&dir.path().join("b/rgb/00000.png"))
    );
    // a config with an unknown field is an input error
    std::fs::write(dir.path().join("bad.json"), r#"{"n_superpixel": 3}"#).unwrap();
    let out = rsdf(
        &["--config", "bad.json", "synth", "--out", "c", "-n", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cnn_paths_reject_non_standard_superpixel_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = rsdf_core::PipelineConfig {
        n_superpixels: 99,
        ..Default::default()
    };
    config.write_json(&dir.path().join("config.json")).unwrap();
    let net = rsdf_core::nn::init_weights(7);
    rsdf_core::nn::save_model(&net, &dir.path().join("model.bin")).unwrap();
    assert_ok(&rsdf(&["--seed", "4", "synth", "--out", "ds", "-n", "1"], dir.path()));
    let out = rsdf(
        &[
            "--config",
            "config.json",
            "infer",
            "--model",
            "model.bin",
            "--rgb",
            "ds/rgb/00000.png",
            "--depth",
            "ds/depth/00000.png",
            "--out",
            "x.png",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("1024"), "{stderr}");
}
