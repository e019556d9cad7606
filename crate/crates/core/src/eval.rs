//! Precision-recall curves and F-measure scoring of saliency maps against
//! binary ground truth.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const F_BETA_SQUARED: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// 256 thresholds k/255 with per-threshold precision and recall averaged
/// over images.
#[derive(Debug, Clone)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSummary {
    pub n_images: usize,
    pub f_measure: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

fn check_pairs(maps: &[&[u8]], gts: &[&[u8]]) -> Result<()> {
    if maps.len() != gts.len() {
        return Err(Error::Alignment(format!(
            "{} maps vs {} ground-truth masks",
            maps.len(),
            gts.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    for (i, (m, g)) in maps.iter().zip(gts).enumerate() {
        if m.len() != g.len() {
            return Err(Error::Alignment(format!(
                "pair {i}: map has {} pixels, mask has {}",
                m.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

fn precision_recall(tp: u64, fp: u64, fn_: u64) -> (f64, f64) {
    let precision = if tp + fp == 0 {
        // empty prediction: perfect if there was nothing to find
        if tp + fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (precision, recall)
}

/// Precision/recall at 256 thresholds: a pixel is predicted salient when its
/// 8-bit value is `>= k`, i.e. its score (v/255) meets the threshold k/255.
pub fn pr_curve(maps: &[&[u8]], gts: &[&[u8]]) -> Result<PrCurve> {
    check_pairs(maps, gts)?;
    let mut precision_sum = [0.0f64; 256];
    let mut recall_sum = [0.0f64; 256];
    for (map, gt) in maps.iter().zip(gts) {
        // count per 8-bit level, then sweep thresholds from the top
        let mut pos = [0u64; 256];
        let mut neg = [0u64; 256];
        let mut total_pos = 0u64;
        for (&v, &g) in map.iter().zip(*gt) {
            if g != 0 {
                pos[v as usize] += 1;
                total_pos += 1;
            } else {
                neg[v as usize] += 1;
            }
        }
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut per_threshold = [(0.0, 0.0); 256];
        for k in (0..256usize).rev() {
            tp += pos[k];
            fp += neg[k];
            per_threshold[k] = precision_recall(tp, fp, total_pos - tp);
        }
        for k in 0..256 {
            precision_sum[k] += per_threshold[k].0;
            recall_sum[k] += per_threshold[k].1;
        }
    }
    let n = maps.len() as f64;
    Ok(PrCurve {
        points: (0..256)
            .map(|k| PrPoint {
                threshold: k as f64 / 255.0,
                precision: precision_sum[k] / n,
                recall: recall_sum[k] / n,
            })
            .collect(),
    })
}

/// The F-measure combination with beta^2 = 0.3; 0/0 collapses to 0.
pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let denom = F_BETA_SQUARED * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + F_BETA_SQUARED) * precision * recall / denom
    }
}

/// Per-image adaptive-threshold F-measure, averaged over images. Each map is
/// binarized at `min(2*mean, 1)` of its own score scale.
pub fn evaluate(maps: &[&[u8]], gts: &[&[u8]]) -> Result<EvalSummary> {
    check_pairs(maps, gts)?;
    let mut f_sum = 0.0;
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    for (map, gt) in maps.iter().zip(gts) {
        let mean: f64 =
            map.iter().map(|&v| v as f64 / 255.0).sum::<f64>() / map.len() as f64;
        let tau = (2.0 * mean).min(1.0);
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for (&v, &g) in map.iter().zip(*gt) {
            let pred = v as f64 / 255.0 >= tau;
            match (pred, g != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (p, r) = precision_recall(tp, fp, fn_);
        f_sum += f_beta(p, r);
        p_sum += p;
        r_sum += r;
    }
    let n = maps.len() as f64;
    Ok(EvalSummary {
        n_images: maps.len(),
        f_measure: f_sum / n,
        mean_precision: p_sum / n,
        mean_recall: r_sum / n,
    })
}

/// Adaptive-threshold F-measure averaged over images.
pub fn f_measure(maps: &[&[u8]], gts: &[&[u8]]) -> Result<f64> {
    Ok(evaluate(maps, gts)?.f_measure)
}

pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}

pub fn write_summary_csv(path: &Path, dataset: &str, summary: &EvalSummary) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "dataset,n_images,f_measure,mean_precision,mean_recall")?;
    writeln!(
        out,
        "{dataset},{},{},{},{}",
        summary.n_images, summary.f_measure, summary.mean_precision, summary.mean_recall
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_map_scores_one_everywhere_above_zero() {
        let gt: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
        let map: Vec<u8> = gt.iter().map(|&g| g * 255).collect();
        let curve = pr_curve(&[&map], &[&gt]).unwrap();
        for p in &curve.points[1..] {
            assert_eq!(p.precision, 1.0);
            assert_eq!(p.recall, 1.0);
        }
    }

    #[test]
    fn inverted_map_has_zero_precision() {
        let gt: Vec<u8> = (0..64).map(|i| u8::from(i < 20)).collect();
        let map: Vec<u8> = gt.iter().map(|&g| (1 - g) * 255).collect();
        let curve = pr_curve(&[&map], &[&gt]).unwrap();
        for p in &curve.points[1..] {
            assert_eq!(p.precision, 0.0, "threshold {}", p.threshold);
        }
    }

    #[test]
    fn curve_matches_per_pixel_counting_oracle() {
        let mut state = 0x853c49e6748fea9bu64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _round in 0..20 {
            let map: Vec<u8> = (0..64).map(|_| (next() % 256) as u8).collect();
            let gt: Vec<u8> = (0..64).map(|_| (next() % 2) as u8).collect();
            let curve = pr_curve(&[&map], &[&gt]).unwrap();
            for k in 0..256usize {
                let mut tp = 0u64;
                let mut fp = 0u64;
                let mut fn_ = 0u64;
                for i in 0..64 {
                    let pred = map[i] as usize >= k;
                    match (pred, gt[i] != 0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                let (p, r) = precision_recall(tp, fp, fn_);
                assert_eq!(curve.points[k].precision, p, "k={k}");
                assert_eq!(curve.points[k].recall, r, "k={k}");
            }
            for w in curve.points.windows(2) {
                assert!(w[1].recall <= w[0].recall);
            }
        }
    }

    #[test]
    fn f_beta_hand_value() {
        let f = f_beta(0.8, 0.6);
        assert!((f - 0.74286).abs() < 1e-5, "got {f}");
        assert_eq!(f_beta(1.0, 1.0), 1.0);
        assert_eq!(f_beta(0.0, 0.7), 0.0);
        assert_eq!(f_beta(0.7, 0.0), 0.0);
    }

    #[test]
    fn f_beta_is_monotone_in_each_argument() {
        let mut prev = 0.0;
        for i in 1..=10 {
            let f = f_beta(i as f64 / 10.0, 0.5);
            assert!(f > prev);
            prev = f;
        }
        prev = 0.0;
        for i in 1..=10 {
            let f = f_beta(0.5, i as f64 / 10.0);
            assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn ground_truth_against_itself_scores_one() {
        let gt: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let map: Vec<u8> = gt.iter().map(|&g| g * 255).collect();
        let f = f_measure(&[&map], &[&gt]).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let gt: Vec<u8> = (0..100).map(|i| u8::from(i < 30)).collect();
        let map: Vec<u8> = (0..100).map(|i| if i >= 70 { 255 } else { 0 }).collect();
        let f = f_measure(&[&map], &[&gt]).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn pixel_permutation_leaves_scores_unchanged() {
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let map: Vec<u8> = (0..64).map(|_| (next() % 256) as u8).collect();
        let gt: Vec<u8> = (0..64).map(|_| (next() % 2) as u8).collect();
        let mut perm: Vec<usize> = (0..64).collect();
        for i in (1..64).rev() {
            perm.swap(i, (next() as usize) % (i + 1));
        }
        let map_p: Vec<u8> = perm.iter().map(|&i| map[i]).collect();
        let gt_p: Vec<u8> = perm.iter().map(|&i| gt[i]).collect();

        let a = pr_curve(&[&map], &[&gt]).unwrap();
        let b = pr_curve(&[&map_p], &[&gt_p]).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x, y);
        }
        assert_eq!(
            f_measure(&[&map], &[&gt]).unwrap(),
            f_measure(&[&map_p], &[&gt_p]).unwrap()
        );
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let a = vec![0u8; 16];
        let b = vec![0u8; 9];
        assert!(matches!(
            pr_curve(&[&a], &[&b]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            pr_curve(&[&a[..]], &[]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let gt: Vec<u8> = (0..32).map(|i| u8::from(i < 8)).collect();
        let map: Vec<u8> = gt.iter().map(|&g| g * 200).collect();
        let curve = pr_curve(&[&map], &[&gt]).unwrap();
        let summary = evaluate(&[&map], &[&gt]).unwrap();
        let curve_path = dir.path().join("curve.csv");
        let summary_path = dir.path().join("summary.csv");
        write_pr_csv(&curve_path, &curve).unwrap();
        write_summary_csv(&summary_path, "toy", &summary).unwrap();
        let text = std::fs::read_to_string(&curve_path).unwrap();
        assert_eq!(text.lines().count(), 257);
        let text = std::fs::read_to_string(&summary_path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("toy,1,"));
    }
}
