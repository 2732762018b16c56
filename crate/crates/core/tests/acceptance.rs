//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Criteria run one after another so the CPU time charged
//! to each is its own.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hideseek::analyzer::{classify_windows, expectation_gap_report, GapSpec, WindowCase};
use hideseek::cam::{
    compute_cam, connected_components, extract_temporal_segments, BinaryMask, Cam, Interval, BBox,
};
use hideseek::eval::{average_precision, iou_box, iou_interval, Detection, GroundTruth, IouCriterion};
use hideseek::hiding::{apply_mask, hide_patches_image, HideMask, HideSpec};
use hideseek::numerics::{
    conv2d_forward, finite_difference_check, ConvLayerSpec, ConvNetConfig, ModelParams, PoolMode, Tensor,
};
use hideseek::pipeline::{run_suite, Evaluation, SuiteConfig, SuiteReport};
use hideseek::synth::{generate_image_dataset, SyntheticImageSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// User + system CPU seconds of this process.
fn cpu_seconds() -> f64 {
    let stat = fs::read_to_string("/proc/self/stat").unwrap_or_default();
    let fields: Vec<&str> = stat.rsplit(')').next().unwrap_or("").split_whitespace().collect();
    match (fields.get(11).and_then(|v| v.parse::<f64>().ok()), fields.get(12).and_then(|v| v.parse::<f64>().ok())) {
        (Some(u), Some(s)) => (u + s) / 100.0,
        _ => f64::NAN,
    }
}

struct Clock {
    wall: Instant,
    cpu: f64,
}

impl Clock {
    fn start() -> Self {
        Self {
            wall: Instant::now(),
            cpu: cpu_seconds(),
        }
    }

    /// CPU seconds since start, or wall seconds when CPU time is unavailable.
    fn cpu(&self) -> f64 {
        let c = cpu_seconds() - self.cpu;
        if c.is_finite() { c } else { self.wall.elapsed().as_secs_f64() }
    }
}

type Verdict = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradients() -> Verdict {
    let clock = Clock::start();
    let nets = [
        ConvNetConfig {
            in_channels: 3,
            layers: vec![ConvLayerSpec::new(3, 4, 2), ConvLayerSpec::new(3, 6, 1)],
            head: PoolMode::Avg,
            num_classes: 4,
        },
        ConvNetConfig {
            in_channels: 2,
            layers: vec![ConvLayerSpec::new(3, 4, 1), ConvLayerSpec::new(3, 4, 2), ConvLayerSpec::new(1, 5, 1)],
            head: PoolMode::Max,
            num_classes: 3,
        },
    ];
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20u64 {
        for net in &nets {
            let params = ModelParams::init(net, seed).unwrap();
            let mut r = rng(1000 + seed);
            let size = r.random_range(8..=16);
            let x = Tensor::from_fn(&[net.in_channels, size, size], |_| r.random_range(-1.0..1.0));
            let rep = finite_difference_check(net, &params, &x, seed as usize % net.num_classes, 1e-6, 16, seed).unwrap();
            worst = worst.max(rep.max_rel_error);
            checked += rep.checked;
        }
    }
    let secs = clock.cpu();
    (
        worst < 1e-4 && secs < 30.0 && checked > 0,
        format!("max relative error {worst:.2e} over 20 seeds x 2 nets ({checked} entries), {secs:.1} s"),
    )
}

fn hiding_statistics() -> Verdict {
    let x = Tensor::filled(&[3, 64, 64], 1.0);
    let spec = HideSpec::new(16, 0.5, vec![0.0; 3], 11);
    let mut counts = [0usize; 16];
    for i in 0..10_000u64 {
        let (_, m) = hide_patches_image(&x, &spec, spec.mask_seed(i % 2000, i / 2000)).unwrap();
        for (c, &h) in counts.iter_mut().zip(&m.cells) {
            *c += h as usize;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / 10_000.0).collect();
    let (lo, hi) = freqs.iter().fold((1.0f64, 0.0f64), |(l, h), &f| (l.min(f), h.max(f)));
    let mut degenerate = true;
    for id in 0..200 {
        for (p, want) in [(0.0, 0), (1.0, 16)] {
            let s = HideSpec::new(16, p, vec![0.0; 3], 11);
            let (out, m) = hide_patches_image(&x, &s, s.mask_seed(id, 0)).unwrap();
            degenerate &= m.hidden_cells() == want;
            degenerate &= if p == 0.0 { out == x } else { out.sum() == 0.0 };
        }
    }
    let grid = HideMask::visible(224, 224, 56).cell_count();
    (
        (0.48..=0.52).contains(&lo) && (0.48..=0.52).contains(&hi) && degenerate && grid == 16,
        format!("per-cell frequency in [{lo:.4}, {hi:.4}] over 10000 masks, p=0/1 exact: {degenerate}, 224/56 grid: {grid} cells"),
    )
}

fn mean_fill_exactness() -> Verdict {
    let d = generate_image_dataset(&SyntheticImageSpec::default(), 64, 1, 2).unwrap();
    let images: Vec<&Tensor> = d.train.iter().map(|s| &s.image).collect();
    let mu = hideseek::hiding::compute_dataset_mean(images.iter().copied()).unwrap();
    let net = ConvNetConfig {
        in_channels: 3,
        layers: vec![ConvLayerSpec::new(3, 8, 2)],
        head: PoolMode::Avg,
        num_classes: 4,
    };
    let params = ModelParams::init(&net, 5).unwrap();
    let (w, b) = (&params.convs[0].weight, params.convs[0].bias.data());
    let reference: Vec<f64> = (0..8)
        .map(|f| b[f] + (0..27).map(|i| w.data()[f * 27 + i] * mu[i / 9]).sum::<f64>())
        .collect();
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut windows = 0;
    for img in &images {
        let mask = HideMask::random(64, 64, 16, 0.5, &mut r);
        let hidden = apply_mask(img, &mask, &mu).unwrap();
        let (out, _) = conv2d_forward(&hidden, w, b, 2, 1).unwrap();
        let grid = classify_windows(&mask, 3, 2, 1).unwrap();
        let (oh, ow) = (grid.out_h, grid.out_w);
        for y in 0..oh {
            for x in 0..ow {
                let info = grid.get(y, x);
                if info.case != WindowCase::FullyHidden || info.touches_padding(3) {
                    continue;
                }
                windows += 1;
                for f in 0..8 {
                    worst = worst.max((out.data()[(f * oh + y) * ow + x] - reference[f]).abs());
                }
            }
        }
    }
    (
        worst < 1e-12 && windows > 0,
        format!("max |activation - (w.mu + b)| = {worst:.2e} over {windows} fully hidden windows x 8 filters"),
    )
}

fn expectation_matching() -> Verdict {
    let d = generate_image_dataset(&SyntheticImageSpec::default(), 200, 1, 0).unwrap();
    let images: Vec<Tensor> = d.train.iter().map(|s| s.image.clone()).collect();
    let net = ConvNetConfig {
        in_channels: 3,
        layers: vec![ConvLayerSpec::new(3, 8, 2)],
        head: PoolMode::Avg,
        num_classes: 4,
    };
    let params = ModelParams::init(&net, 0).unwrap();
    let spec = GapSpec {
        patch_size: 16,
        hide_prob: 0.5,
        stride: 2,
        pad: 1,
        masks_per_image: 2,
        seed: 0,
        min_windows: 10_000,
    };
    let rep = expectation_gap_report(&images, &params.convs[0].weight, params.convs[0].bias.data(), &spec).unwrap();
    let cases = [WindowCase::FullyVisible, WindowCase::FullyHidden, WindowCase::Partial];
    let counts: Vec<usize> = cases.iter().map(|&c| rep.mean_fill.windows(c)).collect();
    let gm = [WindowCase::FullyHidden, WindowCase::Partial].map(|c| rep.mean_fill.worst_relative_gap(c));
    let gz = [WindowCase::FullyHidden, WindowCase::Partial].map(|c| rep.zero_fill.worst_relative_gap(c));
    (
        rep.expectation_matched(0.05),
        format!(
            "mean fill gap/std hidden {:.4} partial {:.4}; zero fill {:.4} / {:.4}; windows visible/hidden/partial {:?}",
            gm[0], gm[1], gz[0], gz[1], counts
        ),
    )
}

fn oracle_equivalence() -> Verdict {
    let mut r = rng(17);
    let mut cam_err: f64 = 0.0;
    for _ in 0..200 {
        let (m, h, w) = (r.random_range(1..10), r.random_range(1..12), r.random_range(1..12));
        let f = Tensor::from_fn(&[m, h, w], |_| r.random_range(-1.0..1.0));
        let wt: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
        let fast = compute_cam(&f, &wt, 0, 0).unwrap();
        let slow = common::naive_cam(&f, &wt);
        cam_err = fast.values.data().iter().zip(&slow).fold(cam_err, |e, (a, b)| e.max((a - b).abs()));
    }
    let mut cc_ok = 0;
    for _ in 0..1000 {
        let bits: Vec<bool> = (0..64).map(|_| r.random_bool(0.5)).collect();
        let got = connected_components(&BinaryMask::new(8, 8, bits.clone()).unwrap());
        cc_ok += (got.labels == common::flood_fill(&bits, 8, 8)) as usize;
    }
    let mut seg_ok = 0;
    for _ in 0..1000 {
        let t = r.random_range(1..100);
        let v: Vec<f64> = (0..t).map(|_| r.random_range(-0.5..1.0)).collect();
        let cam = Cam::new(Tensor::new(vec![t], v.clone()).unwrap(), 0, 0);
        let got: Vec<(f64, f64, f64)> = extract_temporal_segments(&cam, 0.5)
            .unwrap()
            .iter()
            .map(|i| (i.start, i.end, i.score))
            .collect();
        seg_ok += (got == common::scan_segments(&v, 0.5)) as usize;
    }

    // Hand-computed fixtures.
    let mut fixtures = iou_box(&BBox::new(0.0, 0.0, 10.0, 10.0), &BBox::new(5.0, 5.0, 15.0, 15.0)) == 25.0 / 175.0;
    fixtures &= iou_box(&BBox::new(0.0, 0.0, 4.0, 4.0), &BBox::new(4.0, 0.0, 8.0, 4.0)) == 0.0;
    fixtures &= iou_interval(&Interval::new(0.0, 10.0), &Interval::new(5.0, 15.0)) == 5.0 / 15.0;
    fixtures &= iou_interval(&Interval::new(0.0, 10.0), &Interval::new(0.0, 20.0)) == 0.5;
    let gt = |v, s, e| GroundTruth {
        video_id: v,
        interval: Interval::new(s, e),
    };
    let det = |v, s, e, sc| Detection {
        video_id: v,
        interval: Interval::new(s, e).with_score(sc),
    };
    let gts = [gt(0, 0.0, 10.0), gt(0, 20.0, 30.0), gt(1, 0.0, 10.0)];
    let dets = [
        det(0, 0.0, 10.0, 0.9),
        det(0, 0.0, 9.0, 0.8),
        det(1, 1.0, 10.0, 0.7),
        det(0, 50.0, 60.0, 0.6),
    ];
    // Hits T F T F over 3 ground truths: 1/3 * 1 + 1/3 * 2/3.
    let ap = average_precision(&dets, &gts, 0.5, IouCriterion::Inclusive);
    fixtures &= (ap - 5.0 / 9.0).abs() < 1e-15;
    let half = [det(0, 0.0, 20.0, 1.0)];
    fixtures &= average_precision(&half, &gts[..1], 0.5, IouCriterion::Inclusive) == 1.0;
    fixtures &= average_precision(&half, &gts[..1], 0.5, IouCriterion::Strict) == 0.0;

    (
        cam_err < 1e-12 && cc_ok == 1000 && seg_ok == 1000 && fixtures,
        format!(
            "CAM max error {cam_err:.1e}, components {cc_ok}/1000, segments {seg_ok}/1000, IoU/AP fixtures exact: {fixtures}"
        ),
    )
}

const IMAGE_BASE: &str = r#"{
    "dataset": {"source": "synthetic_images", "n_train": 2000, "n_val": 500, "seed": 0},
    "network": {"in_channels": 3, "head": "gap", "num_classes": 4,
        "layers": [{"kernel": 3, "out_channels": 8, "stride": 2},
                   {"kernel": 3, "out_channels": 16, "stride": 2},
                   {"kernel": 3, "out_channels": 32}]},
    "epochs": 10, "batch_size": 32, "lr": 0.05, "momentum": 0.9, "seeds": [0, 1, 2]
}"#;

fn image_suite(variants: &str) -> SuiteReport {
    let cfg = SuiteConfig::from_json(&format!(r#"{{"base": {IMAGE_BASE}, "variants": {variants}}}"#)).unwrap();
    let data = cfg.base.dataset.load().unwrap();
    run_suite(&cfg, &data, 1).unwrap()
}

fn gt_known(rep: &SuiteReport, variant: &str) -> f64 {
    100.0 * rep.row(variant).and_then(|r| r.gt_known_loc).map_or(f64::NAN, |m| m.mean)
}

fn has_gain(has: &SuiteReport, secs: f64) -> Verdict {
    let (base, hs) = (gt_known(has, "baseline"), gt_known(has, "has16"));
    (
        hs >= base + 2.0 && secs < 20.0 * 60.0,
        format!("GT-known Loc HaS {hs:.2} vs baseline {base:.2} (gain {:.2}, 3 seeds), {:.1} CPU-min", hs - base, secs / 60.0),
    )
}

fn temporal_gain() -> (Verdict, SuiteReport) {
    let clock = Clock::start();
    let cfg = SuiteConfig::from_json(
        r#"{
        "base": {
            "dataset": {"source": "synthetic_sequences", "n_train": 1000, "n_val": 300, "seed": 0},
            "network": {"in_channels": 32, "head": "gmp", "num_classes": 4,
                "layers": [{"kernel": 3, "out_channels": 64}, {"kernel": 3, "out_channels": 64}]},
            "epochs": 20, "batch_size": 32, "lr": 0.05, "momentum": 0.9, "seeds": [0, 1, 2]
        },
        "variants": [
            {"name": "full"},
            {"name": "video_has", "hiding": {"kind": "temporal", "segment": 10, "hide_prob": 0.5}}
        ]}"#,
    )
    .unwrap();
    let data = cfg.base.dataset.load().unwrap();
    let rep = run_suite(&cfg, &data, 1).unwrap();
    let secs = clock.cpu();
    let at = |v: &str| {
        rep.row(v)
            .and_then(|r| r.map.iter().find(|(t, _)| (*t - 0.5).abs() < 1e-12))
            .map_or(f64::NAN, |(_, m)| m.mean)
    };
    let (full, has) = (at("full"), at("video_has"));
    (
        (
            has >= full + 2.0 && secs < 10.0 * 60.0,
            format!("mAP@0.5 Video-HaS {has:.2} vs Video-full {full:.2} (gain {:.2}, 3 seeds), {:.1} CPU-min", has - full, secs / 60.0),
        ),
        rep,
    )
}

fn dropout_contrast(has: &SuiteReport, dropout: &SuiteReport) -> Verdict {
    let (h, d) = (gt_known(has, "has16"), gt_known(dropout, "dropout"));
    (d < h, format!("GT-known Loc dropout {d:.2} vs HaS {h:.2} (3 seeds)"))
}

fn metric_lattice(reports: &[&SuiteReport]) -> Verdict {
    let mut checked = 0;
    let mut violations = Vec::new();
    for rep in reports {
        for run in &rep.runs {
            checked += 1;
            match &run.evaluation {
                Evaluation::Image { report, .. } => {
                    for m in std::iter::once(&report.overall).chain(report.per_class.values()) {
                        if m.top1_loc > m.gt_known_loc || m.top1_loc > m.top1_clas {
                            violations.push(format!("{} seed {}", run.variant, run.seed));
                        }
                    }
                }
                Evaluation::Temporal { report, .. } => {
                    let series = std::iter::once(&report.map).chain(report.per_class.values());
                    for s in series {
                        if s.windows(2).any(|w| w[1] > w[0] + 1e-12) {
                            violations.push(format!("{} seed {}", run.variant, run.seed));
                        }
                    }
                }
            }
        }
    }
    (
        violations.is_empty() && checked > 0,
        format!("{checked} evaluations checked, violations: {violations:?}"),
    )
}

fn cli(dir: &Path, threads: &str, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_hideseek"))
        .args(args)
        .current_dir(dir)
        .env("RAYON_NUM_THREADS", threads)
        .env_remove("HIDESEEK_SEED")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = r#"{"dataset": {"source": "synthetic_images", "n_train": 64, "n_val": 16, "seed": 4},
        "network": {"in_channels": 3, "head": "gap", "num_classes": 4,
            "layers": [{"kernel": 3, "out_channels": 4, "stride": 2}, {"kernel": 3, "out_channels": 8, "stride": 2}]},
        "hiding": {"kind": "image", "patch_size": 16, "hide_prob": 0.5},
        "epochs": 3, "batch_size": 16, "seeds": [3]}"#;
    fs::write(d.join("exp.json"), cfg).unwrap();
    let mut ran = true;
    for (tag, threads) in [("a", "1"), ("b", "4")] {
        ran &= cli(d, threads, &["train", "-c", "exp.json", "-o", &format!("train_{tag}")]);
        let ck = format!("train_{tag}/seed-3/checkpoint.bin");
        ran &= cli(d, threads, &["eval", "-k", &ck, "-o", &format!("eval_{tag}")]);
        ran &= cli(d, threads, &["visualize", "-k", &ck, "--ids", "64,65,70", "-o", &format!("viz_{tag}")]);
    }
    if !ran {
        return (false, "a CLI invocation failed".into());
    }
    let same = |a: &str, b: &str| fs::read(d.join(a)).ok().is_some_and(|x| Some(x) == fs::read(d.join(b)).ok());
    let ck = same("train_a/seed-3/checkpoint.bin", "train_b/seed-3/checkpoint.bin")
        && same("train_a/checkpoints.json", "train_b/checkpoints.json");
    let metrics = same("eval_a/metrics.json", "eval_b/metrics.json");
    let mut images = 0;
    let mut viz = true;
    for e in fs::read_dir(d.join("viz_a")).unwrap() {
        let name = e.unwrap().file_name().to_string_lossy().into_owned();
        viz &= same(&format!("viz_a/{name}"), &format!("viz_b/{name}"));
        images += 1;
    }
    (
        ck && metrics && viz && images == 6,
        format!("checkpoint hash identical: {ck}, metrics.json identical: {metrics}, {images} visualization files identical: {viz} (1 vs 4 threads)"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("{} [{n}] {name}: {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        results.push((n, name, v));
    };
    report(1, "gradient correctness", gradients());
    report(2, "hiding statistics", hiding_statistics());
    report(3, "mean-fill exactness", mean_fill_exactness());
    report(4, "expectation matching", expectation_matching());
    report(5, "oracle equivalence", oracle_equivalence());

    let clock = Clock::start();
    let has = image_suite(
        r#"[{"name": "baseline"},
            {"name": "has16", "hiding": {"kind": "image", "patch_size": 16, "hide_prob": 0.5}}]"#,
    );
    let has_secs = clock.cpu();
    report(6, "directional HaS gain", has_gain(&has, has_secs));
    let (temporal, temporal_rep) = temporal_gain();
    report(7, "directional temporal gain", temporal);
    let dropout = image_suite(r#"[{"name": "dropout", "hiding": {"kind": "dropout", "rate": 0.5}}]"#);
    report(8, "dropout contrast", dropout_contrast(&has, &dropout));
    report(9, "metric lattice", metric_lattice(&[&has, &temporal_rep, &dropout]));
    report(10, "determinism", determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
