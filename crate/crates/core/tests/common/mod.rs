//! Slow reference implementations shared by the oracle and acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use hideseek::cam::Interval;
use hideseek::eval::iou_interval;
use hideseek::numerics::Tensor;

pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                * x.data()[(ic * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = s;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

/// Breadth-first 8-connected labeling, labels in raster order of first pixel.
pub fn flood_fill(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut q = VecDeque::from([start]);
        while let Some(p) = q.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask[n] && labels[n] == 0 {
                        labels[n] = next;
                        q.push_back(n);
                    }
                }
            }
        }
    }
    labels
}

/// Greedy matching written out directly, with AP as the mean over true
/// positives of the best precision at that recall or beyond.
pub fn brute_force_ap(dets: &[(u64, f64, f64, f64)], gts: &[(u64, f64, f64)], theta: f64, strict: bool) -> f64 {
    if gts.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| {
        b.3.total_cmp(&a.3)
            .then(a.0.cmp(&b.0))
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for d in &ranked {
        let di = Interval::new(d.1, d.2);
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.0 != d.0 {
                continue;
            }
            let iou = iou_interval(&di, &Interval::new(g.1, g.2));
            let ok = if strict { iou > theta } else { iou >= theta };
            if ok && iou > best_iou {
                best = Some(j);
                best_iou = iou;
            }
        }
        if let Some(j) = best {
            taken[j] = true;
        }
        hits.push(best.is_some());
    }
    let prec: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    (0..hits.len())
        .filter(|&k| hits[k])
        .map(|k| prec[k..].iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / gts.len() as f64
}

/// Runs of `v >= fraction * max(v)` as (start, end, peak), by linear scan.
pub fn scan_segments(v: &[f64], fraction: f64) -> Vec<(f64, f64, f64)> {
    let t = v.len();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut want = Vec::new();
    if max > 0.0 {
        let on: Vec<bool> = v.iter().map(|&x| x >= fraction * max).collect();
        let mut i = 0;
        while i < t {
            if on[i] {
                let s = i;
                while i < t && on[i] {
                    i += 1;
                }
                let peak = v[s..i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                want.push((s as f64, i as f64, peak));
            } else {
                i += 1;
            }
        }
    }
    want
}

/// Sum over feature maps of weight times activation, one pixel at a time.
pub fn naive_cam(f: &Tensor, w: &[f64]) -> Vec<f64> {
    let (m, h, wd) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = vec![0.0; h * wd];
    for y in 0..h {
        for x in 0..wd {
            let mut s = 0.0;
            for i in 0..m {
                s += w[i] * f.data()[(i * h + y) * wd + x];
            }
            out[y * wd + x] = s;
        }
    }
    out
}
