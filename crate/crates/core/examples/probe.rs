// temporary probe: definitive rehearsal with final defaults, 200/50
use rsdf_core::config::PipelineConfig;
use rsdf_core::eval::f_measure;
use rsdf_core::imageio::RgbdImage;
use rsdf_core::pipeline::{infer, train_on_dataset};
use rsdf_core::synth::{generate_image, SynthParams};
use std::time::Instant;

fn synth_img(seed: u64, i: usize) -> RgbdImage {
    let s = generate_image(seed, i, &SynthParams::default());
    RgbdImage::from_parts(
        s.width, s.height, s.rgb,
        s.depth.iter().map(|&d| d as f64).collect(), Some(s.gt),
    ).unwrap()
}

fn refs(v: &[Vec<u8>]) -> Vec<&[u8]> {
    v.iter().map(|m| m.as_slice()).collect()
}

fn main() {
    let mut config = PipelineConfig::default();
    config.train.epochs = 1;
    config.train.batch_size = 64;
    config.train.lr_start = 0.05;
    config.train.lr_end = 0.05;
    config.train.dropout_keep = 1.0;
    config.train.weight_decay = 0.0;
    config.train.augment_flip = false;
    config.train.augment_crop = false;
    config.train.augment_jitter = false;
    config.train.seed = 5;

    let t = Instant::now();
    let (net, log) = train_on_dataset(|i| Ok(synth_img(1, i)), 200, &config, None).unwrap();
    eprintln!("train: acc {:.4} loss {:.4} [{:.0}s]",
        log.last().unwrap().train_accuracy, log.last().unwrap().mean_loss,
        t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut with_lp: Vec<Vec<u8>> = vec![];
    let mut no_lp: Vec<Vec<u8>> = vec![];
    let mut gts: Vec<Vec<u8>> = vec![];
    let mut wins = 0usize;
    for i in 0..50 {
        let img = synth_img(2, i);
        let r = infer(&img, &net, &config, true).unwrap();
        let gt = img.gt.clone().unwrap();
        let f_lp = f_measure(&[&r.refined.as_ref().unwrap().pixels], &[&gt]).unwrap();
        let f_no = f_measure(&[&r.init.pixels], &[&gt]).unwrap();
        wins += usize::from(f_lp > f_no);
        with_lp.push(r.refined.as_ref().unwrap().pixels.clone());
        no_lp.push(r.init.pixels.clone());
        gts.push(gt);
    }
    eprintln!("infer 50: [{:.0}s]", t.elapsed().as_secs_f64());
    let f_lp = f_measure(&refs(&with_lp), &refs(&gts)).unwrap();
    let f_no = f_measure(&refs(&no_lp), &refs(&gts)).unwrap();
    eprintln!("FINAL: F_lp {f_lp:.4}  F_no {f_no:.4}  delta {:+.4}  wins {wins}/50", f_lp - f_no);
}
