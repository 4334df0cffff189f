use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrapline::annotation::{Grade, Partition};
use scrapline::metrics::{inspector_spread, RaterLabel};
use scrapline::segmentation::{segment_grabs, GrabThresholds};
use scrapline::simulator::{
    annotate_sim, gen_campaign, gen_iou_trace, load_campaign, write_campaign, AnnotatorProfile, CampaignConfig,
    LabelSource,
};

fn small(seed: u64) -> CampaignConfig {
    CampaignConfig {
        seed,
        n_train: 20,
        n_val: 5,
        n_test: 5,
        ..CampaignConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_campaign(a.path(), &gen_campaign(&small(3)).unwrap()).unwrap();
    write_campaign(b.path(), &gen_campaign(&small(3)).unwrap()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    write_campaign(c.path(), &gen_campaign(&small(4)).unwrap()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn campaign_directory_round_trips() {
    let camp = gen_campaign(&small(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_campaign(dir.path(), &camp).unwrap();
    assert_eq!(manifest.railcars, 30);
    let back = load_campaign(dir.path()).unwrap();
    assert_eq!(back, camp);
}

#[test]
fn layers_average_to_railcar_level() {
    let camp = gen_campaign(&CampaignConfig { p_hot: 0.2, ..small(6) }).unwrap();
    for (gt, rc) in camp.truth.iter().zip(&camp.railcars) {
        let n = gt.layer_contamination.len();
        assert!((8..=14).contains(&n));
        assert_eq!(rc.layers.len(), n);
        let mean = gt.layer_contamination.iter().sum::<f64>() / n as f64;
        assert!((mean - gt.contamination).abs() < 1e-12);
    }
}

#[test]
fn partitions_and_lines() {
    let camp = gen_campaign(&CampaignConfig::default()).unwrap();
    assert_eq!(camp.split.counts(), (300, 60, 45));
    for (i, rc) in camp.railcars.iter().enumerate() {
        assert_eq!(rc.line as usize, i % 6);
    }
    let train = camp.labeled_bags(Partition::Train, LabelSource::Consensus).unwrap();
    assert!(train.len() <= 300 && train.len() >= 295);
}

#[test]
fn contamination_mean_follows_prior() {
    let camp = gen_campaign(&CampaignConfig {
        n_train: 300,
        n_val: 0,
        n_test: 0,
        ..CampaignConfig::default()
    });
    let camp = camp.unwrap();
    let n = camp.truth.len() as f64;
    let mean = camp.truth.iter().map(|t| t.contamination).sum::<f64>() / n;
    let sd = 5.0 / 12f64.sqrt();
    assert!((mean - 2.5).abs() <= 3.0 * sd / n.sqrt(), "{mean}");
}

/// Solves the 5x5 normal equations by Gaussian elimination.
fn solve(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> [f64; 5] {
    for i in 0..5 {
        let p = (i..5).max_by(|&x, &y| a[x][i].abs().total_cmp(&a[y][i].abs())).unwrap();
        a.swap(i, p);
        b.swap(i, p);
        for r in 0..5 {
            if r != i {
                let f = a[r][i] / a[i][i];
                for c in 0..5 {
                    a[r][c] -= f * a[i][c];
                }
                b[r] -= f * b[i];
            }
        }
    }
    std::array::from_fn(|i| b[i] / a[i][i])
}

#[test]
fn noiseless_features_are_linear_in_truth() {
    let cfg = CampaignConfig {
        sigma_feat: 0.0,
        ..small(8)
    };
    let camp = gen_campaign(&cfg).unwrap();
    let mut rows: Vec<([f64; 5], Vec<f64>)> = Vec::new();
    for (gt, rc) in camp.truth.iter().zip(&camp.railcars) {
        for (l, &c) in rc.layers.iter().zip(&gt.layer_contamination) {
            let mut u = [0.0; 5];
            u[0] = c / cfg.contamination_max;
            u[1 + gt.grade.index()] = 1.0;
            rows.push((u, l.features.clone()));
        }
    }
    for d in 0..cfg.feature_dim {
        let mut ata = [[0.0; 5]; 5];
        let mut atb = [0.0; 5];
        for (u, f) in &rows {
            for i in 0..5 {
                for j in 0..5 {
                    ata[i][j] += u[i] * u[j];
                }
                atb[i] += u[i] * f[d];
            }
        }
        let m = solve(ata, atb);
        for (u, f) in &rows {
            let fit: f64 = m.iter().zip(u).map(|(a, b)| a * b).sum();
            assert!((fit - f[d]).abs() < 1e-9);
        }
    }
}

#[test]
fn grades_shift_feature_means() {
    let camp = gen_campaign(&small(9)).unwrap();
    let mut centroids = vec![(vec![0.0; 32], 0usize); 4];
    for (gt, rc) in camp.truth.iter().zip(&camp.railcars) {
        for l in &rc.layers {
            let c = &mut centroids[gt.grade.index()];
            for (a, b) in c.0.iter_mut().zip(&l.features) {
                *a += b;
            }
            c.1 += 1;
        }
    }
    let present: Vec<Vec<f64>> = centroids
        .into_iter()
        .filter(|c| c.1 > 0)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            let d: f64 = present[i]
                .iter()
                .zip(&present[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d > 0.5, "grades {i} and {j} are {d} apart");
        }
    }
}

#[test]
fn trace_round_trip_exhaustive_to_twenty_grabs() {
    for n in 0..=20 {
        for frames in [7, 8, 9, 12] {
            for seed in 0..5u64 {
                let t = gen_iou_trace(n, frames, 0.04, &mut ChaCha8Rng::seed_from_u64(seed));
                let g = segment_grabs(&t.values, &GrabThresholds::default()).unwrap();
                assert_eq!(g.len(), n, "n={n} frames={frames} seed={seed}");
                for (gi, &p) in g.iter().zip(&t.peaks) {
                    assert!(gi.peak.abs_diff(p) <= 1);
                }
            }
        }
    }
}

#[test]
fn zero_bias_consensus_is_unbiased() {
    let raters: Vec<_> = (0..3)
        .map(|i| AnnotatorProfile::unbiased(format!("r{i}"), 0.3))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let mut total = 0.0;
    for i in 0..n {
        let truth = 10.0 + (i % 7) as f64;
        let c = raters.iter().map(|p| annotate_sim(p, truth, &mut rng)).sum::<f64>() / 3.0;
        total += c - truth;
    }
    let sd = 0.3 / 3f64.sqrt();
    assert!((total / n as f64).abs() <= 3.0 * sd / (n as f64).sqrt());
}

#[test]
fn spread_recovers_configured_bias() {
    let biases = [0.5, 0.0, -0.5];
    let cfg = CampaignConfig {
        annotators: biases
            .iter()
            .enumerate()
            .map(|(i, &b)| AnnotatorProfile {
                bias: b,
                ..AnnotatorProfile::unbiased(format!("r{i}"), 0.3)
            })
            .collect(),
        // Keep labels clear of the clamp at 0.
        contamination_min: 2.0,
        contamination_max: 5.0,
        ..CampaignConfig::default()
    };
    let camp = gen_campaign(&cfg).unwrap();
    let labels: Vec<RaterLabel> = camp
        .railcars
        .iter()
        .flat_map(|rc| {
            rc.ratings.iter().map(|r| RaterLabel {
                rater: r.rater.clone(),
                railcar: rc.railcar_id.clone(),
                value: r.contamination,
            })
        })
        .collect();
    let report = inspector_spread(&labels).unwrap();
    let n = camp.railcars.len() as f64;
    // rater - consensus = (2 e_i - e_j - e_k) / 3 has sd 0.3 * sqrt(6) / 3.
    let sd = 0.3 * 6f64.sqrt() / 3.0;
    for (r, &b) in report.raters.iter().zip(&biases) {
        assert!((r.bias - b).abs() <= 3.0 * sd / n.sqrt(), "{} {}", r.rater, r.bias);
    }
}

#[test]
fn rater_grades_mostly_match_truth() {
    let camp = gen_campaign(&small(10)).unwrap();
    let mut agree = 0;
    let mut total = 0;
    for (gt, rc) in camp.truth.iter().zip(&camp.railcars) {
        for r in &rc.ratings {
            total += 1;
            if r.grade == Some(gt.grade) {
                agree += 1;
            }
        }
    }
    assert!(agree as f64 / total as f64 > 0.8);
    assert!(Grade::ALL.len() == 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn trace_round_trip_any_seed(n in 0usize..=20, frames in 7usize..15, seed in any::<u64>(), noise in 0.0f64..0.1) {
        let t = gen_iou_trace(n, frames, noise, &mut ChaCha8Rng::seed_from_u64(seed));
        let g = segment_grabs(&t.values, &GrabThresholds::default()).unwrap();
        prop_assert_eq!(g.len(), n);
    }
}
