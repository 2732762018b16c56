//! Library routines checked against slow, independent reference versions.

mod common;

use hideseek::cam::{
    compute_cam, connected_components, extract_temporal_segments, localize_bbox, threshold_cam, BinaryMask, Cam,
    Interval,
};
use hideseek::eval::{average_precision, Detection, GroundTruth, IouCriterion};
use hideseek::numerics::{conv2d_forward, finite_difference_check, ConvLayerSpec, ConvNetConfig, ModelParams, PoolMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng(1);
    for _ in 0..200 {
        let c = r.random_range(1..4);
        let o = r.random_range(1..5);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2);
        let h = r.random_range(k..12);
        let w = r.random_range(k..12);
        let x = random_tensor(&[c, h, w], &mut r);
        let wt = random_tensor(&[o, c, k, k], &mut r);
        let b: Vec<f64> = (0..o).map(|_| r.random_range(-1.0..1.0)).collect();
        let (fast, _) = conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
        let slow = common::naive_conv(&x, &wt, &b, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }
}

#[test]
fn cam_matches_weighted_sum() {
    let mut r = rng(2);
    for _ in 0..200 {
        let (m, h, w) = (r.random_range(1..9), r.random_range(1..10), r.random_range(1..10));
        let f = random_tensor(&[m, h, w], &mut r);
        let wt: Vec<f64> = (0..m).map(|_| r.random_range(-2.0..2.0)).collect();
        let cam = compute_cam(&f, &wt, 0, 0).unwrap();
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..m).map(|i| wt[i] * f.data()[(i * h + y) * w + x]).sum();
                assert!((cam.values.data()[y * w + x] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn components_match_flood_fill() {
    let mut r = rng(3);
    for i in 0..1000 {
        let density = 0.2 + 0.6 * (i as f64 / 1000.0);
        let bits: Vec<bool> = (0..64).map(|_| r.random_bool(density)).collect();
        let m = BinaryMask::new(8, 8, bits.clone()).unwrap();
        let got = connected_components(&m);
        assert_eq!(got.labels, common::flood_fill(&bits, 8, 8), "mask {i}");
        let sizes: usize = got.components.iter().map(|c| c.size).sum();
        assert_eq!(sizes, bits.iter().filter(|&&b| b).count());
    }
}

#[test]
fn bbox_is_tight_box_of_largest_component() {
    let mut r = rng(4);
    for _ in 0..500 {
        let values = random_tensor(&[8, 8], &mut r).map(|v| v + 0.2);
        let cam = Cam::new(values.clone(), 0, 0);
        let mask = threshold_cam(&cam, 0.5).unwrap();
        let labels = common::flood_fill(&mask.bits, 8, 8);
        let n = labels.iter().copied().max().unwrap_or(0);
        let got = localize_bbox(&cam, 0.5).unwrap();
        if n == 0 {
            assert!(got.is_none());
            continue;
        }
        let size = |l: u32| labels.iter().filter(|&&v| v == l).count();
        let peak = |l: u32| {
            labels
                .iter()
                .zip(values.data())
                .filter(|(&v, _)| v == l)
                .map(|(_, &c)| c)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let best = (1..=n)
            .max_by(|&a, &b| size(a).cmp(&size(b)).then(peak(a).total_cmp(&peak(b))).then(b.cmp(&a)))
            .unwrap();
        let cells: Vec<usize> = (0..64).filter(|&i| labels[i] == best).collect();
        let x0 = cells.iter().map(|i| i % 8).min().unwrap() as f64;
        let x1 = cells.iter().map(|i| i % 8).max().unwrap() as f64 + 1.0;
        let y0 = cells.iter().map(|i| i / 8).min().unwrap() as f64;
        let y1 = cells.iter().map(|i| i / 8).max().unwrap() as f64 + 1.0;
        let b = got.unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (x0, y0, x1, y1));
    }
}

#[test]
fn segments_match_scan() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let t = r.random_range(1..60);
        let v: Vec<f64> = (0..t).map(|_| r.random_range(-0.5..1.0)).collect();
        let cam = Cam::new(Tensor::new(vec![t], v.clone()).unwrap(), 0, 0);
        let got = extract_temporal_segments(&cam, 0.5).unwrap();
        let want = common::scan_segments(&v, 0.5);
        let got: Vec<(f64, f64, f64)> = got.iter().map(|i| (i.start, i.end, i.score)).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn ap_matches_brute_force() {
    let mut r = rng(6);
    for case in 0..500 {
        let videos = r.random_range(1..4u64);
        let gts: Vec<(u64, f64, f64)> = (0..r.random_range(0..6))
            .map(|_| {
                let s = r.random_range(0..40) as f64;
                (r.random_range(0..videos), s, s + r.random_range(1..15) as f64)
            })
            .collect();
        let dets: Vec<(u64, f64, f64, f64)> = (0..r.random_range(0..10))
            .map(|_| {
                let s = r.random_range(0..40) as f64;
                let score = r.random_range(0..5) as f64 / 4.0;
                (r.random_range(0..videos), s, s + r.random_range(1..15) as f64, score)
            })
            .collect();
        let d: Vec<Detection> = dets
            .iter()
            .map(|&(v, s, e, sc)| Detection {
                video_id: v,
                interval: Interval::new(s, e).with_score(sc),
            })
            .collect();
        let g: Vec<GroundTruth> = gts
            .iter()
            .map(|&(v, s, e)| GroundTruth {
                video_id: v,
                interval: Interval::new(s, e),
            })
            .collect();
        for theta in [0.1, 0.3, 0.5] {
            for strict in [false, true] {
                let crit = if strict { IouCriterion::Strict } else { IouCriterion::Inclusive };
                let got = average_precision(&d, &g, theta, crit);
                let want = common::brute_force_ap(&dets, &gts, theta, strict);
                assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
            }
        }
    }
}

fn small_net(head: PoolMode) -> ConvNetConfig {
    ConvNetConfig {
        in_channels: 2,
        layers: vec![ConvLayerSpec::new(3, 3, 2), ConvLayerSpec::new(3, 4, 1)],
        head,
        num_classes: 3,
    }
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..20u64 {
        for head in [PoolMode::Avg, PoolMode::Max] {
            let cfg = small_net(head);
            let params = ModelParams::init(&cfg, seed).unwrap();
            let mut r = rng(100 + seed);
            let x = random_tensor(&[2, 9, 9], &mut r);
            let rep = finite_difference_check(&cfg, &params, &x, (seed % 3) as usize, 1e-6, 12, seed).unwrap();
            assert!(rep.checked > 0);
            assert!(rep.max_rel_error < 1e-4, "seed {seed} {head:?}: {}", rep.max_rel_error);
        }
    }
}
