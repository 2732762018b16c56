//! Window-level view of hiding at the first convolution: which output
//! positions see visible, hidden, or mixed input, and how their activation
//! statistics compare under different fill values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiding::{apply_mask, compute_dataset_mean, HideMask};
use crate::numerics::{conv2d_forward, ConvGeometry, Tensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowCase {
    FullyVisible,
    FullyHidden,
    Partial,
}

impl WindowCase {
    pub const ALL: [WindowCase; 3] = [WindowCase::FullyVisible, WindowCase::FullyHidden, WindowCase::Partial];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowInfo {
    pub case: WindowCase,
    pub y: usize,
    pub x: usize,
    /// Hidden input pixels inside the receptive field (padding excluded).
    pub hidden: usize,
    /// In-bounds input pixels inside the receptive field.
    pub inside: usize,
}

impl WindowInfo {
    pub fn touches_padding(&self, kernel: usize) -> bool {
        self.inside < kernel * kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub windows: Vec<WindowInfo>,
}

impl WindowGrid {
    pub fn get(&self, y: usize, x: usize) -> &WindowInfo {
        &self.windows[y * self.out_w + x]
    }

    pub fn count(&self, case: WindowCase) -> usize {
        self.windows.iter().filter(|w| w.case == case).count()
    }
}

/// Labels every output position of a KxK convolution by the number of
/// hidden pixels in its receptive field. A window that overlaps the zero
/// padding is classified by its in-bounds pixels only.
pub fn classify_windows(mask: &HideMask, kernel: usize, stride: usize, pad: usize) -> Result<WindowGrid> {
    let (h, w) = (mask.height, mask.width);
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument("kernel and stride must be >= 1".into()));
    }
    if h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded {h}x{w} input"
        )));
    }
    let out_h = (h + 2 * pad - kernel) / stride + 1;
    let out_w = (w + 2 * pad - kernel) / stride + 1;
    // summed-area table of hidden pixels
    let px = mask.pixel_mask();
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = px[y * w + x] as usize + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let rect = |y0: usize, x0: usize, y1: usize, x1: usize| {
        sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
    };
    let mut windows = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (ys, xs) = ((oy * stride) as isize - pad as isize, (ox * stride) as isize - pad as isize);
            let y0 = ys.max(0) as usize;
            let x0 = xs.max(0) as usize;
            let y1 = ((ys + kernel as isize) as usize).min(h);
            let x1 = ((xs + kernel as isize) as usize).min(w);
            let (hidden, inside) = if y1 > y0 && x1 > x0 {
                (rect(y0, x0, y1, x1), (y1 - y0) * (x1 - x0))
            } else {
                (0, 0)
            };
            let case = if hidden == 0 {
                WindowCase::FullyVisible
            } else if hidden == inside {
                WindowCase::FullyHidden
            } else {
                WindowCase::Partial
            };
            windows.push(WindowInfo {
                case,
                y: oy,
                x: ox,
                hidden,
                inside,
            });
        }
    }
    Ok(WindowGrid {
        out_h,
        out_w,
        kernel,
        windows,
    })
}

/// Largest |conv(fully hidden window) - (sum_i w_i . mu + b)| over all
/// filters, where the convolution runs through the regular conv kernel and
/// the reference is a direct summation.
pub fn hidden_case_exactness(weights: &Tensor, bias: &[f64], mu: &[f64]) -> Result<f64> {
    let [o, c, k, k2] = *weights.shape() else {
        return Err(Error::Shape(format!("weights must be OxCxKxK, got {:?}", weights.shape())));
    };
    if k != k2 || mu.len() != c || bias.len() != o {
        return Err(Error::Shape(format!(
            "weights {:?}, bias {}, mu {} are inconsistent",
            weights.shape(),
            bias.len(),
            mu.len()
        )));
    }
    let patch = Tensor::from_fn(&[c, k, k], |i| mu[i / (k * k)]);
    let (out, _) = conv2d_forward(&patch, weights, bias, 1, 0)?;
    let w = weights.data();
    let mut worst: f64 = 0.0;
    for f in 0..o {
        let mut reference = bias[f];
        for ch in 0..c {
            for i in 0..k * k {
                reference += w[((f * c) + ch) * k * k + i] * mu[ch];
            }
        }
        worst = worst.max((out.data()[f] - reference).abs());
    }
    Ok(worst)
}

/// Settings of the expectation-gap experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSpec {
    pub patch_size: usize,
    pub hide_prob: f64,
    pub stride: usize,
    pub pad: usize,
    pub masks_per_image: usize,
    pub seed: u64,
    /// Cases with fewer windows than this are flagged as insufficient.
    pub min_windows: usize,
}

impl Default for GapSpec {
    fn default() -> Self {
        Self {
            patch_size: 16,
            hide_prob: 0.5,
            stride: 1,
            pad: 0,
            masks_per_image: 1,
            seed: 0,
            min_windows: 10_000,
        }
    }
}

/// Shifted running moments; the shift makes a constant stream give an
/// exactly constant mean.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    shift: Option<f64>,
    n: usize,
    s1: f64,
    s2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        let r = *self.shift.get_or_insert(v);
        let d = v - r;
        self.n += 1;
        self.s1 += d;
        self.s2 += d * d;
    }

    fn mean(&self) -> f64 {
        match self.shift {
            Some(r) => r + self.s1 / self.n as f64,
            None => f64::NAN,
        }
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let m = self.s1 / self.n as f64;
        ((self.s2 - self.n as f64 * m * m) / (self.n - 1) as f64).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseStats {
    pub windows: usize,
    pub mean: f64,
    pub variance: f64,
    /// |mean - mean(fully visible)|.
    pub gap: f64,
    /// `gap` divided by the fully-visible standard deviation.
    pub relative_gap: f64,
    pub insufficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterGap {
    pub filter: usize,
    /// sum_i w_i . mu + b
    pub hidden_reference: f64,
    pub cases: BTreeMap<WindowCase, CaseStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillGap {
    pub fill: Vec<f64>,
    pub filters: Vec<FilterGap>,
}

impl FillGap {
    /// Largest relative gap of `case` over all filters.
    pub fn worst_relative_gap(&self, case: WindowCase) -> f64 {
        self.filters
            .iter()
            .filter_map(|f| f.cases.get(&case))
            .map(|c| c.relative_gap)
            .fold(0.0, f64::max)
    }

    pub fn windows(&self, case: WindowCase) -> usize {
        self.filters
            .first()
            .and_then(|f| f.cases.get(&case))
            .map_or(0, |c| c.windows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub mean: Vec<f64>,
    pub mean_fill: FillGap,
    pub zero_fill: FillGap,
    /// Windows overlapping the zero padding, left out of every statistic.
    pub padding_windows: usize,
}

impl GapReport {
    /// Mean-fill gaps below `tolerance` (relative to the visible std) for the
    /// hidden and partial cases, each with enough windows, and a strictly
    /// larger worst gap under zero fill.
    pub fn expectation_matched(&self, tolerance: f64) -> bool {
        let cases = [WindowCase::FullyHidden, WindowCase::Partial];
        let enough = self.mean_fill.filters.iter().all(|f| {
            WindowCase::ALL
                .iter()
                .all(|c| f.cases.get(c).is_some_and(|s| !s.insufficient))
        });
        let small = cases.iter().all(|&c| self.mean_fill.worst_relative_gap(c) < tolerance);
        let worse = cases.iter().all(|&c| {
            self.zero_fill.worst_relative_gap(c) > self.mean_fill.worst_relative_gap(c)
        });
        enough && small && worse
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:<6} {:<14} {:>9} {:>12} {:>12} {:>10}", "fill", "filter", "case", "windows", "mean", "gap", "gap/std");
        for (name, fg) in [("mean", &self.mean_fill), ("zero", &self.zero_fill)] {
            for f in &fg.filters {
                for (case, c) in &f.cases {
                    let _ = writeln!(
                        s,
                        "{:<6} {:<6} {:<14} {:>9} {:>12.6} {:>12.3e} {:>10.4}{}",
                        name,
                        f.filter,
                        format!("{case:?}"),
                        c.windows,
                        c.mean,
                        c.gap,
                        c.relative_gap,
                        if c.insufficient { " (insufficient)" } else { "" }
                    );
                }
            }
        }
        s
    }
}

/// Runs the first-layer convolution (pre-activation) over every image under
/// random masks, once with the dataset mean as fill and once with zeros,
/// using the same masks for both, and compares per-case activation
/// statistics.
pub fn expectation_gap_report(images: &[Tensor], weights: &Tensor, bias: &[f64], spec: &GapSpec) -> Result<GapReport> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("expectation_gap_report needs images".into()))?;
    let mean = compute_dataset_mean(images.iter())?;
    let (c, h, w) = first.dims3()?;
    let geo = ConvGeometry::new(&[c, h, w], weights.shape(), spec.stride, spec.pad)?;
    let (o, k) = (geo.out_channels, geo.kernel);
    if spec.patch_size == 0 || !(0.0..=1.0).contains(&spec.hide_prob) {
        return Err(Error::InvalidArgument("patch_size >= 1 and hide_prob in [0, 1] required".into()));
    }
    let fills = [mean.clone(), vec![0.0; c]];
    let mut moments = vec![vec![[Moments::default(); 3]; o]; 2];
    let mut padding_windows = 0;
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::Shape("images differ in shape".into()));
        }
        for draw in 0..spec.masks_per_image {
            let mut r = rng::stream(spec.seed, &[rng::tag::HIDE, i as u64, draw as u64]);
            let mask = HideMask::random(h, w, spec.patch_size, spec.hide_prob, &mut r);
            let grid = classify_windows(&mask, k, spec.stride, spec.pad)?;
            let plane = grid.out_h * grid.out_w;
            for (fi, fill) in fills.iter().enumerate() {
                let x = apply_mask(img, &mask, fill)?;
                let (out, _) = conv2d_forward(&x, weights, bias, spec.stride, spec.pad)?;
                for (pos, win) in grid.windows.iter().enumerate() {
                    if win.touches_padding(k) {
                        continue;
                    }
                    let ci = WindowCase::ALL.iter().position(|&c| c == win.case).unwrap();
                    for f in 0..o {
                        moments[fi][f][ci].push(out.data()[f * plane + pos]);
                    }
                }
            }
            padding_windows += grid.windows.iter().filter(|w| w.touches_padding(k)).count();
        }
    }

    let wd = weights.data();
    let per_k = c * k * k;
    let reference = |f: usize| {
        let mut s = bias[f];
        for ch in 0..c {
            for j in 0..k * k {
                s += wd[f * per_k + ch * k * k + j] * mean[ch];
            }
        }
        s
    };
    let build = |fi: usize| FillGap {
        fill: fills[fi].clone(),
        filters: (0..o)
            .map(|f| {
                let m = &moments[fi][f];
                let visible_mean = m[0].mean();
                let visible_std = m[0].variance().sqrt();
                let cases = WindowCase::ALL
                    .iter()
                    .enumerate()
                    .map(|(ci, &case)| {
                        let gap = if m[ci].n == 0 || m[0].n == 0 {
                            f64::NAN
                        } else {
                            (m[ci].mean() - visible_mean).abs()
                        };
                        let relative_gap = if gap == 0.0 {
                            0.0
                        } else if visible_std > 0.0 {
                            gap / visible_std
                        } else {
                            f64::INFINITY
                        };
                        (
                            case,
                            CaseStats {
                                windows: m[ci].n,
                                mean: m[ci].mean(),
                                variance: m[ci].variance(),
                                gap,
                                relative_gap,
                                insufficient: m[ci].n < spec.min_windows,
                            },
                        )
                    })
                    .collect();
                FilterGap {
                    filter: f,
                    hidden_reference: reference(f),
                    cases,
                }
            })
            .collect(),
    };
    let (mean_fill, zero_fill) = (build(0), build(1));
    Ok(GapReport {
        mean,
        mean_fill,
        zero_fill,
        padding_windows,
    })
}
