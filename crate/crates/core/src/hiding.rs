//! Hiding transforms: image patch grids, feature-map grids, temporal
//! segments, mixed patch sizes, pixel dropout, and the dataset mean used as
//! the fill value.
//!
//! Grids are anchored at the top-left corner. When the patch size does not
//! divide the extent, the right/bottom cells are truncated but are still
//! hidden or kept as a unit, so every pixel belongs to exactly one cell.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// One entry of a mixed patch-size list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PatchChoice {
    Size(usize),
    /// The "no hiding" sentinel: the full image is shown. Serialized as `"none"`.
    NoHide(NoHideTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoHideTag {
    None,
}

impl PatchChoice {
    pub const NO_HIDE: PatchChoice = PatchChoice::NoHide(NoHideTag::None);
}

/// Parameters of one hiding policy with its fill vector already resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HideSpec {
    /// Patch edge S in pixels, or segment length in frames.
    pub patch_size: usize,
    pub hide_prob: f64,
    /// Value written into hidden positions, one entry per channel.
    pub fill: Vec<f64>,
    pub seed: u64,
    /// When non-empty, each (sample, epoch) draws its patch size from this list.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mixed_sizes: Vec<PatchChoice>,
}

impl HideSpec {
    pub fn new(patch_size: usize, hide_prob: f64, fill: Vec<f64>, seed: u64) -> Self {
        Self {
            patch_size,
            hide_prob,
            fill,
            seed,
            mixed_sizes: Vec::new(),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hide_prob) {
            return Err(Error::InvalidArgument(format!(
                "hide_prob must be in [0, 1], got {}",
                self.hide_prob
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidArgument("patch_size must be >= 1".into()));
        }
        if self.fill.len() != channels {
            return Err(Error::Shape(format!(
                "fill has {} values but input has {channels} channels",
                self.fill.len()
            )));
        }
        if self.mixed_sizes.contains(&PatchChoice::Size(0)) {
            return Err(Error::InvalidArgument("mixed patch size 0".into()));
        }
        Ok(())
    }

    /// Seed of the mask for `(sample, epoch)`, independent of visiting order.
    pub fn mask_seed(&self, sample_id: u64, epoch: u64) -> u64 {
        rng::derive_seed(self.seed, &[rng::tag::HIDE, sample_id, epoch])
    }
}

/// Per-cell hide flags over a `height x width` extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HideMask {
    pub height: usize,
    pub width: usize,
    pub cell: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major over the grid, true = hidden.
    pub cells: Vec<bool>,
}

impl HideMask {
    pub fn visible(height: usize, width: usize, cell: usize) -> Self {
        let grid_h = height.div_ceil(cell);
        let grid_w = width.div_ceil(cell);
        Self {
            height,
            width,
            cell,
            grid_h,
            grid_w,
            cells: vec![false; grid_h * grid_w],
        }
    }

    /// Draws each cell independently with probability `p`.
    pub fn random(height: usize, width: usize, cell: usize, p: f64, rng: &mut impl Rng) -> Self {
        let mut m = Self::visible(height, width, cell);
        for c in &mut m.cells {
            *c = rng.random_bool(p);
        }
        m
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn hidden_cells(&self) -> usize {
        self.cells.iter().filter(|&&h| h).count()
    }

    pub fn is_hidden(&self, y: usize, x: usize) -> bool {
        self.cells[(y / self.cell) * self.grid_w + x / self.cell]
    }

    /// Row-major per-pixel flags.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.is_hidden(y, x));
            }
        }
        out
    }

    pub fn hidden_fraction(&self) -> f64 {
        let px = self.pixel_mask();
        px.iter().filter(|&&h| h).count() as f64 / px.len() as f64
    }

    /// Writes the pixel mask as a binary PGM (hidden = 0, visible = 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u8> = self
            .pixel_mask()
            .into_iter()
            .map(|h| if h { 0 } else { 255 })
            .collect();
        write_pgm(path, self.width, self.height, &pixels)
    }
}

pub(crate) fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Overwrites every hidden pixel of a CxHxW tensor with `fill[c]`.
/// Applying the same mask twice gives the same result as applying it once.
pub fn apply_mask(image: &Tensor, mask: &HideMask, fill: &[f64]) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but image is {h}x{w}",
            mask.height, mask.width
        )));
    }
    if fill.len() != c {
        return Err(Error::Shape(format!(
            "fill has {} values but image has {c} channels",
            fill.len()
        )));
    }
    let px = mask.pixel_mask();
    let mut out = image.clone();
    for (ch, &f) in fill.iter().enumerate() {
        for (v, &hidden) in out.channel_mut(ch).iter_mut().zip(&px) {
            if hidden {
                *v = f;
            }
        }
    }
    Ok(out)
}

/// Per-channel mean over every pixel of every tensor (CxHxW or CxT).
pub fn compute_dataset_mean<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for t in tensors {
        let c = t.shape()[0];
        if sums.is_empty() {
            sums = vec![0.0; c];
        } else if sums.len() != c {
            return Err(Error::Shape(format!(
                "dataset mixes {} and {c} channels",
                sums.len()
            )));
        }
        let plane = t.len() / c;
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += t.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return Err(Error::Empty("cannot compute the mean of an empty dataset".into()));
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Hides grid patches of a CxHxW image. `mask_seed` should come from
/// [`HideSpec::mask_seed`] so each epoch draws a fresh pattern.
pub fn hide_patches_image(image: &Tensor, spec: &HideSpec, mask_seed: u64) -> Result<(Tensor, HideMask)> {
    let (c, h, w) = image.dims3()?;
    spec.validate(c)?;
    let mut rng = rng::stream(mask_seed, &[]);
    let size = if spec.mixed_sizes.is_empty() {
        PatchChoice::Size(spec.patch_size)
    } else {
        sample_mixed_patch_size(&spec.mixed_sizes, &mut rng)?
    };
    let mask = match size {
        PatchChoice::Size(s) => HideMask::random(h, w, s, spec.hide_prob, &mut rng),
        PatchChoice::NoHide(_) => HideMask::visible(h, w, spec.patch_size),
    };
    let out = if mask.hidden_cells() == 0 {
        image.clone()
    } else {
        apply_mask(image, &mask, &spec.fill)?
    };
    Ok((out, mask))
}

/// Uniform draw over the list, including the no-hide sentinel if present.
pub fn sample_mixed_patch_size(sizes: &[PatchChoice], rng: &mut impl Rng) -> Result<PatchChoice> {
    if sizes.is_empty() {
        return Err(Error::Empty("mixed patch size list".into()));
    }
    Ok(sizes[rng.random_range(0..sizes.len())])
}

/// Fill used for feature-map hiding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFill {
    #[default]
    Zero,
    /// Per-channel spatial mean of the map being hidden.
    ChannelMean,
}

/// Hides grid cells of an MxHxW feature map across all M channels.
pub fn hide_patches_featuremap(
    features: &Tensor,
    patch_size: usize,
    hide_prob: f64,
    fill: FeatureFill,
    rng: &mut impl Rng,
) -> Result<(Tensor, HideMask)> {
    let (m, h, w) = features.dims3()?;
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::InvalidArgument(format!(
            "feature patch size {patch_size} does not fit a {h}x{w} map"
        )));
    }
    if !(0.0..=1.0).contains(&hide_prob) {
        return Err(Error::InvalidArgument(format!(
            "hide_prob must be in [0, 1], got {hide_prob}"
        )));
    }
    let mask = HideMask::random(h, w, patch_size, hide_prob, rng);
    if mask.hidden_cells() == 0 {
        return Ok((features.clone(), mask));
    }
    let values: Vec<f64> = match fill {
        FeatureFill::Zero => vec![0.0; m],
        FeatureFill::ChannelMean => (0..m)
            .map(|c| features.channel(c).iter().sum::<f64>() / (h * w) as f64)
            .collect(),
    };
    Ok((apply_mask(features, &mask, &values)?, mask))
}

/// Splits a CxT (or Cx1xT) sequence into consecutive segments of
/// `spec.patch_size` frames and replaces hidden frames with `spec.fill`.
pub fn hide_segments_sequence(seq: &Tensor, spec: &HideSpec, mask_seed: u64) -> Result<(Tensor, HideMask)> {
    let (c, t) = match *seq.shape() {
        [c, t] => (c, t),
        [c, 1, t] => (c, t),
        _ => {
            return Err(Error::Shape(format!(
                "sequence must be CxT or Cx1xT, got {:?}",
                seq.shape()
            )))
        }
    };
    spec.validate(c)?;
    if spec.patch_size > t {
        return Err(Error::InvalidArgument(format!(
            "segment length {} exceeds sequence length {t}",
            spec.patch_size
        )));
    }
    let mut rng = rng::stream(mask_seed, &[]);
    let mask = HideMask::random(1, t, spec.patch_size, spec.hide_prob, &mut rng);
    if mask.hidden_cells() == 0 {
        return Ok((seq.clone(), mask));
    }
    let as3 = seq.clone().reshape(vec![c, 1, t])?;
    let out = apply_mask(&as3, &mask, &spec.fill)?.reshape(seq.shape().to_vec())?;
    Ok((out, mask))
}

/// Whether image-layer dropout also applies to evaluation inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    TrainOnly,
    TrainAndTest,
}

/// Zeroes each value independently with probability `rate` (no rescaling).
pub fn pixel_dropout(image: &Tensor, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for v in out.data_mut() {
        if rng.random_bool(rate) {
            *v = 0.0;
        }
    }
    Ok(out)
}
