//! Class activation maps and the localization steps built on them:
//! thresholding at a fraction of the map maximum, 8-connected components,
//! the tight box around the largest component, temporal runs, and CAM
//! ensembling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box in input-pixel coordinates, half-open `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0,
            y0,
            x1,
            y1,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }
}

/// Temporal segment in frames, half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub score: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self {
            start,
            end,
            score: 0.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn len(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// A class activation map for one class of one input.
///
/// `values` is `[h, w]` for images and `[t]` for sequences. `scale_y` and
/// `scale_x` map one map cell to input pixels (or frames).
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub values: Tensor,
    pub class_id: usize,
    pub input_id: u64,
    pub scale_y: f64,
    pub scale_x: f64,
}

impl Cam {
    pub fn new(values: Tensor, class_id: usize, input_id: u64) -> Self {
        Self {
            values,
            class_id,
            input_id,
            scale_y: 1.0,
            scale_x: 1.0,
        }
    }

    /// Sets the cell-to-input scale so that the map spans `input_h x input_w`.
    pub fn with_input_extent(mut self, input_h: usize, input_w: usize) -> Self {
        let (h, w) = self.extent();
        self.scale_y = input_h as f64 / h as f64;
        self.scale_x = input_w as f64 / w as f64;
        self
    }

    /// `(height, width)`; 1-D maps have height 1.
    pub fn extent(&self) -> (usize, usize) {
        match *self.values.shape() {
            [h, w] => (h, w),
            [t] => (1, t),
            _ => unreachable!("cam values are 1-D or 2-D"),
        }
    }

    pub fn max(&self) -> f64 {
        self.values.max()
    }

    /// Min-max normalized 8-bit rendering (constant maps render black).
    pub fn to_gray(&self) -> Vec<u8> {
        let (lo, hi) = (self.values.min(), self.values.max());
        let span = hi - lo;
        self.values
            .data()
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let (h, w) = self.extent();
        crate::hiding::write_pgm(path, w, h, &self.to_gray())
    }
}

/// CAM(c) = sum_i W(c, i) * F_i over the final MxHxW feature maps.
pub fn compute_cam(features: &Tensor, weight_row: &[f64], class_id: usize, input_id: u64) -> Result<Cam> {
    let (m, h, w) = features.dims3()?;
    if weight_row.len() != m {
        return Err(Error::Shape(format!(
            "classifier row has {} weights for {m} feature maps",
            weight_row.len()
        )));
    }
    let mut out = vec![0.0; h * w];
    for (i, &wi) in weight_row.iter().enumerate() {
        for (o, &f) in out.iter_mut().zip(features.channel(i)) {
            *o += wi * f;
        }
    }
    let shape = if h == 1 { vec![w] } else { vec![h, w] };
    Ok(Cam::new(Tensor::new(shape, out)?, class_id, input_id))
}

/// Row-major binary map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }
}

/// Foreground where `cam >= fraction * max(cam)`; empty when the max is not positive.
pub fn threshold_cam(cam: &Cam, fraction: f64) -> Result<BinaryMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold fraction must be in (0, 1), got {fraction}"
        )));
    }
    let (h, w) = cam.extent();
    let max = cam.max();
    let bits = if max > 0.0 {
        let t = fraction * max;
        cam.values.data().iter().map(|&v| v >= t).collect()
    } else {
        vec![false; h * w]
    };
    BinaryMask::new(h, w, bits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// 1-based label as stored in [`Labeling::labels`].
    pub label: u32,
    pub size: usize,
    pub min_y: usize,
    pub min_x: usize,
    pub max_y: usize,
    pub max_x: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub height: usize,
    pub width: usize,
    /// 0 for background, otherwise the component label.
    pub labels: Vec<u32>,
    /// Ordered by label; labels are assigned in raster order of first pixel.
    pub components: Vec<Component>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Maximal 8-connected foreground regions (two-pass union-find).
pub fn connected_components(mask: &BinaryMask) -> Labeling {
    let (h, w) = (mask.height, mask.width);
    let mut provisional = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut look = |yy: isize, xx: isize| {
                if yy >= 0 && xx >= 0 && (xx as usize) < w {
                    let l = provisional[yy as usize * w + xx as usize];
                    if l != 0 {
                        neighbours[n] = l;
                        n += 1;
                    }
                }
            };
            let (yi, xi) = (y as isize, x as isize);
            look(yi, xi - 1);
            look(yi - 1, xi - 1);
            look(yi - 1, xi);
            look(yi - 1, xi + 1);
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let min = *neighbours[..n].iter().min().unwrap();
                for &other in &neighbours[..n] {
                    union(&mut parent, min, other);
                }
                min
            };
            provisional[y * w + x] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut labels = vec![0u32; h * w];
    let mut components: Vec<Component> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = provisional[y * w + x];
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p) as usize;
            if remap[root] == 0 {
                components.push(Component {
                    label: components.len() as u32 + 1,
                    size: 0,
                    min_y: y,
                    min_x: x,
                    max_y: y,
                    max_x: x,
                });
                remap[root] = components.len() as u32;
            }
            let l = remap[root];
            labels[y * w + x] = l;
            let c = &mut components[l as usize - 1];
            c.size += 1;
            c.min_y = c.min_y.min(y);
            c.min_x = c.min_x.min(x);
            c.max_y = c.max_y.max(y);
            c.max_x = c.max_x.max(x);
        }
    }
    Labeling {
        height: h,
        width: w,
        labels,
        components,
    }
}

/// Tight box around the largest 8-connected component of the thresholded CAM,
/// scaled to input pixels. Ties on size go to the larger interior CAM
/// maximum, then to the top-left-most extent. `None` means "no localization".
pub fn localize_bbox(cam: &Cam, fraction: f64) -> Result<Option<BBox>> {
    let mask = threshold_cam(cam, fraction)?;
    let labeling = connected_components(&mask);
    let vals = cam.values.data();
    let mut interior_max = vec![f64::NEG_INFINITY; labeling.components.len()];
    for (i, &l) in labeling.labels.iter().enumerate() {
        if l != 0 {
            let m = &mut interior_max[l as usize - 1];
            *m = m.max(vals[i]);
        }
    }
    let best = labeling.components.iter().max_by(|a, b| {
        let (ia, ib) = (a.label as usize - 1, b.label as usize - 1);
        a.size
            .cmp(&b.size)
            .then(interior_max[ia].total_cmp(&interior_max[ib]))
            .then((b.min_y, b.min_x).cmp(&(a.min_y, a.min_x)))
    });
    Ok(best.map(|c| {
        let score = interior_max[c.label as usize - 1];
        scale_box(cam, c.min_x, c.min_y, c.max_x + 1, c.max_y + 1).with_score(score)
    }))
}

/// Nearest-neighbour mapping of a cell range to input coordinates.
fn scale_box(cam: &Cam, x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
    BBox::new(
        (x0 as f64 * cam.scale_x).floor(),
        (y0 as f64 * cam.scale_y).floor(),
        (x1 as f64 * cam.scale_x).ceil(),
        (y1 as f64 * cam.scale_y).ceil(),
    )
}

/// Every maximal above-threshold run of a 1-D CAM, ordered by start, each
/// scored by the CAM maximum inside it.
pub fn extract_temporal_segments(cam: &Cam, fraction: f64) -> Result<Vec<Interval>> {
    if cam.values.ndim() != 1 {
        return Err(Error::Shape(format!(
            "temporal CAM must be 1-D, got {:?}",
            cam.values.shape()
        )));
    }
    let mask = threshold_cam(cam, fraction)?;
    let vals = cam.values.data();
    let mut out = Vec::new();
    let mut run: Option<(usize, f64)> = None;
    for (t, &on) in mask.bits.iter().enumerate() {
        match (on, run) {
            (true, None) => run = Some((t, vals[t])),
            (true, Some((s, m))) => run = Some((s, m.max(vals[t]))),
            (false, Some((s, m))) => {
                out.push(scale_interval(cam, s, t, m));
                run = None;
            }
            (false, None) => {}
        }
    }
    if let Some((s, m)) = run {
        out.push(scale_interval(cam, s, vals.len(), m));
    }
    Ok(out)
}

fn scale_interval(cam: &Cam, start: usize, end: usize, score: f64) -> Interval {
    Interval::new(
        (start as f64 * cam.scale_x).floor(),
        (end as f64 * cam.scale_x).ceil(),
    )
    .with_score(score)
}

/// Nearest-neighbour resampling of a CAM onto a `h x w` grid.
pub fn resample_cam(cam: &Cam, h: usize, w: usize) -> Result<Cam> {
    let (sh, sw) = cam.extent();
    if (sh, sw) == (h, w) {
        return Ok(cam.clone());
    }
    let src = cam.values.data();
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let sy = (y * sh) / h;
            let sx = (x * sw) / w;
            src[sy * sw + sx]
        })
        .collect();
    let shape = if cam.values.ndim() == 1 { vec![w] } else { vec![h, w] };
    Ok(Cam {
        values: Tensor::new(shape, data)?,
        class_id: cam.class_id,
        input_id: cam.input_id,
        scale_y: cam.scale_y * sh as f64 / h as f64,
        scale_x: cam.scale_x * sw as f64 / w as f64,
    })
}

/// Element-wise mean of CAMs (resampled to the first map's grid) and of the
/// matching class-probability vectors.
pub fn ensemble_cams(cams: &[Cam], class_probs: &[Vec<f64>]) -> Result<(Cam, Vec<f64>)> {
    let first = cams
        .first()
        .ok_or_else(|| Error::Empty("ensemble needs at least one CAM".into()))?;
    if cams.iter().any(|c| c.class_id != first.class_id) {
        return Err(Error::InvalidArgument(
            "ensembled CAMs must share a class id".into(),
        ));
    }
    let (h, w) = first.extent();
    let mut acc = vec![0.0; h * w];
    for c in cams {
        let r = resample_cam(c, h, w)?;
        for (a, v) in acc.iter_mut().zip(r.values.data()) {
            *a += v;
        }
    }
    let n = cams.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let mut cam = first.clone();
    cam.values = Tensor::new(first.values.shape().to_vec(), acc)?;

    let probs = match class_probs.first() {
        None => Vec::new(),
        Some(p0) => {
            if class_probs.iter().any(|p| p.len() != p0.len()) {
                return Err(Error::Shape("probability vectors differ in length".into()));
            }
            let k = class_probs.len() as f64;
            (0..p0.len())
                .map(|i| class_probs.iter().map(|p| p[i]).sum::<f64>() / k)
                .collect()
        }
    };
    Ok((cam, probs))
}

/// One line of the localization JSON-lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationLine {
    pub input_id: u64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<Interval>,
    pub score: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam2(h: usize, w: usize, v: Vec<f64>) -> Cam {
        Cam::new(Tensor::new(vec![h, w], v).unwrap(), 0, 0)
    }

    fn cam1(v: Vec<f64>) -> Cam {
        Cam::new(Tensor::new(vec![v.len()], v).unwrap(), 0, 0)
    }

    #[test]
    fn single_map_identity_and_zero_weights() {
        let f = Tensor::from_fn(&[1, 3, 4], |i| i as f64 - 3.0);
        let cam = compute_cam(&f, &[1.0], 2, 7).unwrap();
        assert_eq!(cam.values.data(), f.data());
        assert_eq!(cam.values.shape(), &[3, 4]);
        assert_eq!((cam.class_id, cam.input_id), (2, 7));
        let f = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let cam = compute_cam(&f, &[0.0; 3], 0, 0).unwrap();
        assert!(cam.values.data().iter().all(|&v| v == 0.0));
        assert!(compute_cam(&f, &[1.0; 2], 0, 0).is_err());
    }

    #[test]
    fn threshold_examples() {
        let m = threshold_cam(&cam1(vec![1.0, 0.5, 0.1]), 0.2).unwrap();
        assert_eq!(m.bits, vec![true, true, false]);
        let m = threshold_cam(&cam1(vec![0.3; 5]), 0.5).unwrap();
        assert_eq!(m.count(), 5);
        let m = threshold_cam(&cam1(vec![0.1, 0.7, 0.69, 0.2]), 0.999).unwrap();
        assert_eq!(m.bits, vec![false, true, false, false]);
        let m = threshold_cam(&cam1(vec![-1.0, 0.0]), 0.5).unwrap();
        assert_eq!(m.count(), 0);
        assert!(threshold_cam(&cam1(vec![1.0]), 1.0).is_err());
    }

    #[test]
    fn components_basic() {
        let m = BinaryMask::new(3, 3, vec![false, false, false, false, true, false, false, false, false]).unwrap();
        let l = connected_components(&m);
        assert_eq!(l.components.len(), 1);
        assert_eq!(l.components[0].size, 1);
        let m = BinaryMask::new(4, 5, vec![true; 20]).unwrap();
        let l = connected_components(&m);
        assert_eq!(l.components.len(), 1);
        assert_eq!(l.components[0].size, 20);
        // diagonal neighbours join under 8-connectivity
        let m = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(connected_components(&m).components.len(), 1);
    }

    #[test]
    fn bbox_single_blob_and_largest_of_two() {
        let mut v = vec![0.0; 36];
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            v[y * 6 + x] = 1.0;
        }
        let b = localize_bbox(&cam2(6, 6, v.clone()), 0.2).unwrap().unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (1.0, 1.0, 3.0, 3.0));

        // blob A: 5 pixels (weaker), blob B: 3 pixels (stronger)
        let mut v = vec![0.0; 36];
        for (y, x) in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)] {
            v[y * 6 + x] = 0.5;
        }
        for (y, x) in [(4, 4), (4, 5), (5, 5)] {
            v[y * 6 + x] = 1.0;
        }
        let b = localize_bbox(&cam2(6, 6, v), 0.2).unwrap().unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (0.0, 0.0, 3.0, 2.0));
        assert_eq!(b.score, Some(0.5));
    }

    #[test]
    fn bbox_scales_to_input() {
        let mut v = vec![0.0; 14 * 14];
        v[3 * 14 + 5] = 1.0;
        let cam = cam2(14, 14, v).with_input_extent(224, 224);
        let b = localize_bbox(&cam, 0.2).unwrap().unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (80.0, 48.0, 96.0, 64.0));
    }

    #[test]
    fn no_localization_for_nonpositive_cam() {
        assert_eq!(localize_bbox(&cam2(2, 2, vec![-1.0; 4]), 0.2).unwrap(), None);
    }

    #[test]
    fn tie_break_prefers_stronger_then_top_left() {
        let mut v = vec![0.0; 25];
        v[0] = 0.8;
        v[24] = 1.0;
        let b = localize_bbox(&cam2(5, 5, v), 0.5).unwrap().unwrap();
        assert_eq!((b.x0, b.y0), (4.0, 4.0));
        let mut v = vec![0.0; 25];
        v[4] = 1.0;
        v[20] = 1.0;
        let b = localize_bbox(&cam2(5, 5, v), 0.5).unwrap().unwrap();
        assert_eq!((b.x0, b.y0), (4.0, 0.0));
    }

    #[test]
    fn temporal_runs() {
        let segs = extract_temporal_segments(&cam1(vec![0.0, 1.0, 1.0, 0.0, 1.0]), 0.5).unwrap();
        let spans: Vec<_> = segs.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(spans, vec![(1.0, 3.0), (4.0, 5.0)]);
        assert!(extract_temporal_segments(&cam1(vec![0.0, -1.0]), 0.5).unwrap().is_empty());
        let segs = extract_temporal_segments(&cam1(vec![2.0; 7]), 0.5).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start, segs[0].end, segs[0].score), (0.0, 7.0, 2.0));
    }

    #[test]
    fn ensemble_means() {
        let a = cam1(vec![1.0, 2.0]);
        let b = cam1(vec![3.0, 6.0]);
        let (m, p) = ensemble_cams(&[a.clone()], &[vec![0.2, 0.8]]).unwrap();
        assert_eq!(m, a);
        assert_eq!(p, vec![0.2, 0.8]);
        let (m, _) = ensemble_cams(&[a.clone(), a.clone()], &[]).unwrap();
        assert_eq!(m, a);
        let (m, p) = ensemble_cams(&[a, b], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.values.data(), &[2.0, 4.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(ensemble_cams(&[], &[]).is_err());
    }

    #[test]
    fn ensemble_resamples_to_first_grid() {
        let a = cam2(2, 2, vec![0.0; 4]);
        let b = cam2(4, 4, (0..16).map(|i| i as f64).collect());
        let (m, _) = ensemble_cams(&[a, b], &[]).unwrap();
        assert_eq!(m.values.data(), &[0.0, 1.0, 4.0, 5.0]);
    }
}
