//! Desk-scale datasets with known ground truth.
//!
//! Images hold one object made of a small, strongly class-specific
//! "discriminative" part and a large body whose texture carries only a weak
//! class cue. Sequences hold action instances made of a few strong key
//! frames inside a longer run of weakly class-indicative frames.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cam::{threshold_cam, BBox, Cam, Interval};
use crate::error::{Error, Result};
use crate::numerics::{ArrayFile, Tensor};
use crate::rng;

pub const PART_BACKGROUND: u8 = 0;
pub const PART_DISCRIMINATIVE: u8 = 1;
pub const PART_BODY: u8 = 2;

const SPLIT_TRAIN: u64 = 1;
const SPLIT_VAL: u64 = 2;
const MAX_PLACEMENT_RETRIES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticImageSpec {
    pub size: usize,
    pub num_classes: usize,
    /// Inclusive range of object box widths.
    pub object_width: (usize, usize),
    pub object_height: (usize, usize),
    /// Edge of the square discriminative part.
    pub part_size: usize,
    pub background: f64,
    pub body_level: f64,
    /// Peak-to-mean amplitude of the oriented body stripes.
    pub body_texture: f64,
    /// Edge of the square body blocks that each draw their own texture.
    pub body_block: usize,
    /// Probability that a body block shows the object's class texture
    /// rather than one of the other classes' textures.
    pub body_class_prob: f64,
    /// Contrast of the discriminative part's class colour.
    pub part_contrast: f64,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    /// Random object placement; otherwise the object is centred.
    pub jitter: bool,
}

impl Default for SyntheticImageSpec {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 4,
            object_width: (40, 48),
            object_height: (32, 40),
            part_size: 8,
            background: 0.5,
            body_level: 0.5,
            body_texture: 0.15,
            body_block: 4,
            body_class_prob: 0.7,
            part_contrast: 0.5,
            noise: 0.05,
            jitter: true,
        }
    }
}

impl SyntheticImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 8 {
            return Err(Error::Config(format!(
                "num_classes must be in [2, 8], got {}",
                self.num_classes
            )));
        }
        let (w0, w1) = self.object_width;
        let (h0, h1) = self.object_height;
        if w0 > w1 || h0 > h1 || w0 == 0 || h0 == 0 {
            return Err(Error::Config("object size ranges must be non-empty".into()));
        }
        if self.part_size == 0 || self.part_size > w0 / 2 || self.part_size > h0 {
            return Err(Error::Config(format!(
                "part_size {} does not fit the smallest object",
                self.part_size
            )));
        }
        let min_area = (w0 * h0) as f64;
        if (self.part_size * self.part_size) as f64 >= 0.25 * min_area {
            return Err(Error::Config(
                "discriminative part must cover < 25% of the object".into(),
            ));
        }
        if self.body_block == 0 {
            return Err(Error::Config("body_block must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.body_class_prob) || self.noise < 0.0 {
            return Err(Error::Config("body_class_prob must be in [0,1], noise >= 0".into()));
        }
        Ok(())
    }
}

/// Saturated colour of the discriminative part for each class.
fn part_colour(class: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; 8] = [
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [-1.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, -1.0, -1.0],
    ];
    TABLE[class]
}

/// Zero-mean oriented stripe pattern for texture `t`: four orientations,
/// period 4 px for textures 0-3 and 8 px for 4-7.
fn stripe(t: usize, y: usize, x: usize) -> f64 {
    let (y, x) = (y as i64, x as i64);
    let phase = match t % 4 {
        0 => x,
        1 => y,
        2 => x + y,
        _ => x - y,
    };
    let period = if t < 4 { 4 } else { 8 };
    if phase.rem_euclid(period) < period / 2 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub label: usize,
    /// 3 x size x size.
    pub image: Tensor,
    pub gt_boxes: Vec<BBox>,
    /// Row-major part labels (`PART_*`).
    pub parts: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub spec: SyntheticImageSpec,
    pub seed: u64,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
}

fn render_image(spec: &SyntheticImageSpec, id: u64, label: usize, rng: &mut impl Rng) -> Result<ImageSample> {
    let n = spec.size;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("noise std is finite");
    let mut placement = None;
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let w = rng.random_range(spec.object_width.0..=spec.object_width.1);
        let h = rng.random_range(spec.object_height.0..=spec.object_height.1);
        if w > n || h > n {
            continue;
        }
        let (x0, y0) = if spec.jitter {
            (rng.random_range(0..=n - w), rng.random_range(0..=n - h))
        } else {
            ((n - w) / 2, (n - h) / 2)
        };
        placement = Some((x0, y0, w, h));
        break;
    }
    let (ox, oy, w, h) = placement.ok_or_else(|| {
        Error::Config(format!(
            "object of size {:?}x{:?} does not fit a {n}x{n} image",
            spec.object_width, spec.object_height
        ))
    })?;
    let head_left = rng.random_bool(0.5);
    // Texture origin, so stripe phase and block edges are not tied to pixel coordinates.
    let (ty, tx) = (rng.random_range(0..8usize), rng.random_range(0..8usize));
    let d = spec.part_size;
    let half = d / 2;
    let cy = oy + h / 2;
    let (body_x0, body_x1, part_x0) = if head_left {
        (ox + half, ox + w, ox)
    } else {
        (ox, ox + w - half, ox + w - d)
    };
    let part_y0 = cy - half;

    let mut parts = vec![PART_BACKGROUND; n * n];
    for y in oy..oy + h {
        for x in body_x0..body_x1 {
            parts[y * n + x] = PART_BODY;
        }
    }
    for y in part_y0..part_y0 + d {
        for x in part_x0..part_x0 + d {
            parts[y * n + x] = PART_DISCRIMINATIVE;
        }
    }

    let bs = spec.body_block;
    let blocks_w = (n + 8).div_ceil(bs);
    let textures: Vec<usize> = (0..blocks_w * (n + 8).div_ceil(bs))
        .map(|_| {
            if rng.random_bool(spec.body_class_prob) {
                label
            } else {
                let other = rng.random_range(0..spec.num_classes - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            }
        })
        .collect();
    let colour = part_colour(label);
    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let base = match parts[y * n + x] {
                PART_BACKGROUND => [spec.background; 3],
                PART_BODY => {
                    let (yy, xx) = (y + ty, x + tx);
                    let t = textures[(yy / bs) * blocks_w + xx / bs];
                    [spec.body_level + spec.body_texture * stripe(t, yy, xx); 3]
                }
                _ => {
                    let mid = spec.background;
                    [
                        mid + spec.part_contrast * colour[0],
                        mid + spec.part_contrast * colour[1],
                        mid + spec.part_contrast * colour[2],
                    ]
                }
            };
            for (c, b) in base.iter().enumerate() {
                let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data[c * n * n + y * n + x] = b + eps;
            }
        }
    }
    Ok(ImageSample {
        id,
        label,
        image: Tensor::new(vec![3, n, n], data)?,
        gt_boxes: vec![BBox::new(ox as f64, oy as f64, (ox + w) as f64, (oy + h) as f64)],
        parts,
    })
}

/// Deterministic in `seed`; class `i % num_classes` for the i-th sample of
/// each split, so classes are balanced.
pub fn generate_image_dataset(spec: &SyntheticImageSpec, n_train: usize, n_val: usize, seed: u64) -> Result<ImageDataset> {
    spec.validate()?;
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument("n_train and n_val must be >= 1".into()));
    }
    let make = |split: u64, count: usize, id_base: u64| -> Result<Vec<ImageSample>> {
        (0..count)
            .map(|i| {
                let mut r = rng::stream(seed, &[rng::tag::SAMPLE, split, i as u64]);
                render_image(spec, id_base + i as u64, i % spec.num_classes, &mut r)
            })
            .collect()
    };
    Ok(ImageDataset {
        spec: spec.clone(),
        seed,
        train: make(SPLIT_TRAIN, n_train, 0)?,
        val: make(SPLIT_VAL, n_val, n_train as u64)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSequenceSpec {
    pub length: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Inclusive range of action instance lengths (frames).
    pub instance_length: (usize, usize),
    pub key_length: usize,
    pub key_amplitude: f64,
    pub weak_amplitude: f64,
    pub noise: f64,
    /// Probability that a sequence holds two instances instead of one.
    pub two_instance_prob: f64,
}

impl Default for SyntheticSequenceSpec {
    fn default() -> Self {
        Self {
            length: 200,
            dim: 32,
            num_classes: 4,
            instance_length: (30, 60),
            key_length: 4,
            key_amplitude: 4.0,
            weak_amplitude: 2.0,
            noise: 0.5,
            two_instance_prob: 0.5,
        }
    }
}

impl SyntheticSequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let (l0, l1) = self.instance_length;
        if self.num_classes < 2 || 2 * self.num_classes > self.dim {
            return Err(Error::Config(format!(
                "need 2 <= num_classes and 2*num_classes <= dim, got {} classes, dim {}",
                self.num_classes, self.dim
            )));
        }
        if l0 == 0 || l0 > l1 || self.key_length == 0 || self.key_length > l0 {
            return Err(Error::Config("invalid instance/key lengths".into()));
        }
        if 2 * l1 + 1 > self.length {
            return Err(Error::Config(format!(
                "two instances of up to {l1} frames do not fit {} frames",
                self.length
            )));
        }
        if !(0.0..=1.0).contains(&self.two_instance_prob) || self.noise < 0.0 {
            return Err(Error::Config("two_instance_prob must be in [0,1], noise >= 0".into()));
        }
        Ok(())
    }

    /// Key-frame direction of class `c`: basis vector `2c`.
    pub fn key_direction(&self, c: usize) -> usize {
        2 * c
    }

    /// Weak-frame direction of class `c`: basis vector `2c + 1`.
    pub fn weak_direction(&self, c: usize) -> usize {
        2 * c + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub id: u64,
    pub label: usize,
    /// dim x 1 x length.
    pub features: Tensor,
    pub instances: Vec<Interval>,
    pub key_spans: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub spec: SyntheticSequenceSpec,
    pub seed: u64,
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
}

fn render_sequence(spec: &SyntheticSequenceSpec, id: u64, label: usize, rng: &mut impl Rng) -> Result<SequenceSample> {
    let (t_total, d) = (spec.length, spec.dim);
    let count = if rng.random_bool(spec.two_instance_prob) { 2 } else { 1 };
    let mut lens: Vec<usize> = (0..count)
        .map(|_| rng.random_range(spec.instance_length.0..=spec.instance_length.1))
        .collect();
    // Distribute the free frames into count+1 gaps with at least one frame
    // between instances.
    let busy: usize = lens.iter().sum::<usize>() + (count - 1);
    let free = t_total - busy;
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut instances = Vec::new();
    let mut key_spans = Vec::new();
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, len) in lens.drain(..).enumerate() {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        let s = cursor;
        let e = s + len;
        let k = rng.random_range(s..=e - spec.key_length);
        instances.push(Interval::new(s as f64, e as f64));
        key_spans.push(Interval::new(k as f64, (k + spec.key_length) as f64));
        cursor = e + 1;
    }

    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("noise std is finite");
    let mut data = vec![0.0; d * t_total];
    for v in data.iter_mut() {
        if spec.noise > 0.0 {
            *v = noise.sample(rng);
        }
    }
    let (kd, wd) = (spec.key_direction(label), spec.weak_direction(label));
    for (inst, key) in instances.iter().zip(&key_spans) {
        for t in inst.start as usize..inst.end as usize {
            data[wd * t_total + t] += spec.weak_amplitude;
        }
        for t in key.start as usize..key.end as usize {
            data[kd * t_total + t] += spec.key_amplitude;
        }
    }
    Ok(SequenceSample {
        id,
        label,
        features: Tensor::new(vec![d, 1, t_total], data)?,
        instances,
        key_spans,
    })
}

pub fn generate_sequence_dataset(spec: &SyntheticSequenceSpec, n_train: usize, n_val: usize, seed: u64) -> Result<SequenceDataset> {
    spec.validate()?;
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument("n_train and n_val must be >= 1".into()));
    }
    let make = |split: u64, count: usize, id_base: u64| -> Result<Vec<SequenceSample>> {
        (0..count)
            .map(|i| {
                let mut r = rng::stream(seed, &[rng::tag::SAMPLE, split, i as u64]);
                render_sequence(spec, id_base + i as u64, i % spec.num_classes, &mut r)
            })
            .collect()
    };
    Ok(SequenceDataset {
        spec: spec.clone(),
        seed,
        train: make(SPLIT_TRAIN, n_train, 0)?,
        val: make(SPLIT_VAL, n_val, n_train as u64)?,
    })
}

/// Share of above-threshold CAM area on each part kind.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartMass {
    pub discriminative: f64,
    pub body: f64,
    pub background: f64,
}

/// Thresholds the CAM, maps each foreground cell to its input pixels and
/// counts which part those pixels belong to. `None` when nothing survives
/// the threshold.
pub fn part_mass_fractions(cam: &Cam, parts: &[u8], size: usize, fraction: f64) -> Result<Option<PartMass>> {
    if parts.len() != size * size {
        return Err(Error::Shape(format!(
            "part mask has {} entries for a {size}x{size} image",
            parts.len()
        )));
    }
    let mask = threshold_cam(cam, fraction)?;
    let mut counts = [0usize; 3];
    for y in 0..size {
        for x in 0..size {
            let cy = ((y as f64 / cam.scale_y) as usize).min(mask.height - 1);
            let cx = ((x as f64 / cam.scale_x) as usize).min(mask.width - 1);
            if mask.get(cy, cx) {
                counts[parts[y * size + x].min(2) as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(None);
    }
    let t = total as f64;
    Ok(Some(PartMass {
        background: counts[PART_BACKGROUND as usize] as f64 / t,
        discriminative: counts[PART_DISCRIMINATIVE as usize] as f64 / t,
        body: counts[PART_BODY as usize] as f64 / t,
    }))
}

/// Mean of per-sample part masses (samples without foreground are skipped).
pub fn average_part_mass(masses: impl IntoIterator<Item = Option<PartMass>>) -> (PartMass, usize) {
    let mut acc = PartMass::default();
    let mut n = 0;
    for m in masses.into_iter().flatten() {
        acc.discriminative += m.discriminative;
        acc.body += m.body;
        acc.background += m.background;
        n += 1;
    }
    if n > 0 {
        let k = n as f64;
        acc.discriminative /= k;
        acc.body /= k;
        acc.background /= k;
    }
    (acc, n)
}

// ---------------------------------------------------------------------------
// On-disk layout: dataset.json + manifest.jsonl + tensors/ + masks/

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetInfo {
    Images { spec: SyntheticImageSpec, seed: u64 },
    Sequences { spec: SyntheticSequenceSpec, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub split: String,
    pub label: usize,
    pub tensor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intervals: Vec<Interval>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub key_spans: Vec<Interval>,
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    ArrayFile {
        header: vec![],
        arrays: vec![("data".into(), t.clone())],
    }
    .save(path)
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    let f = ArrayFile::load(path)?;
    f.arrays
        .into_iter()
        .next()
        .map(|(_, t)| t)
        .ok_or_else(|| Error::format(path, "no array in tensor file"))
}

fn write_manifest(dir: &Path, info: &DatasetInfo, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(info)? + "\n")?;
    let mut w = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<(DatasetInfo, Vec<ManifestEntry>)> {
    let info: DatasetInfo = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let f = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut entries = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(&line)?);
        }
    }
    Ok((info, entries))
}

fn split_name(is_train: bool) -> &'static str {
    if is_train {
        "train"
    } else {
        "val"
    }
}

impl ImageDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("tensors"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let n = self.spec.size;
        let mut entries = Vec::new();
        for (is_train, samples) in [(true, &self.train), (false, &self.val)] {
            for s in samples {
                let tensor = format!("tensors/{:06}.bin", s.id);
                let mask = format!("masks/{:06}.bin", s.id);
                write_tensor(&dir.join(&tensor), &s.image)?;
                let parts = Tensor::new(vec![n, n], s.parts.iter().map(|&p| p as f64).collect())?;
                write_tensor(&dir.join(&mask), &parts)?;
                entries.push(ManifestEntry {
                    id: s.id,
                    split: split_name(is_train).into(),
                    label: s.label,
                    tensor,
                    mask: Some(mask),
                    boxes: s.gt_boxes.clone(),
                    intervals: vec![],
                    key_spans: vec![],
                });
            }
        }
        let info = DatasetInfo::Images {
            spec: self.spec.clone(),
            seed: self.seed,
        };
        write_manifest(dir, &info, &entries)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (info, entries) = read_manifest(dir)?;
        let DatasetInfo::Images { spec, seed } = info else {
            return Err(Error::format(dir, "dataset is not an image dataset"));
        };
        let mut train = Vec::new();
        let mut val = Vec::new();
        for e in entries {
            let image = read_tensor(&dir.join(&e.tensor))?;
            let parts = match &e.mask {
                Some(m) => read_tensor(&dir.join(m))?
                    .data()
                    .iter()
                    .map(|&v| v as u8)
                    .collect(),
                None => vec![],
            };
            let sample = ImageSample {
                id: e.id,
                label: e.label,
                image,
                gt_boxes: e.boxes,
                parts,
            };
            match e.split.as_str() {
                "train" => train.push(sample),
                "val" => val.push(sample),
                other => return Err(Error::format(dir, format!("unknown split {other:?}"))),
            }
        }
        Ok(Self { spec, seed, train, val })
    }
}

impl SequenceDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("tensors"))?;
        let mut entries = Vec::new();
        for (is_train, samples) in [(true, &self.train), (false, &self.val)] {
            for s in samples {
                let tensor = format!("tensors/{:06}.bin", s.id);
                write_tensor(&dir.join(&tensor), &s.features)?;
                entries.push(ManifestEntry {
                    id: s.id,
                    split: split_name(is_train).into(),
                    label: s.label,
                    tensor,
                    mask: None,
                    boxes: vec![],
                    intervals: s.instances.clone(),
                    key_spans: s.key_spans.clone(),
                });
            }
        }
        let info = DatasetInfo::Sequences {
            spec: self.spec.clone(),
            seed: self.seed,
        };
        write_manifest(dir, &info, &entries)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (info, entries) = read_manifest(dir)?;
        let DatasetInfo::Sequences { spec, seed } = info else {
            return Err(Error::format(dir, "dataset is not a sequence dataset"));
        };
        let mut train = Vec::new();
        let mut val = Vec::new();
        for e in entries {
            let sample = SequenceSample {
                id: e.id,
                label: e.label,
                features: read_tensor(&dir.join(&e.tensor))?,
                instances: e.intervals,
                key_spans: e.key_spans,
            };
            match e.split.as_str() {
                "train" => train.push(sample),
                "val" => val.push(sample),
                other => return Err(Error::format(dir, format!("unknown split {other:?}"))),
            }
        }
        Ok(Self { spec, seed, train, val })
    }
}

/// Reads just `dataset.json` to learn which kind of dataset a directory holds.
pub fn dataset_info(dir: &Path) -> Result<DatasetInfo> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?)
}

/// Class histogram of a split.
pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a usize>) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}
