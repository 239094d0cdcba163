//! Deterministic, seedable image augmentation.
//!
//! The centerpiece is random center cropping: pad the patch by `pad` pixels
//! on every side (so a 96x96 patch becomes 112x112), then crop back to the
//! original resolution at a uniformly random offset. Offsets range over
//! [0, 2*pad] per axis, which guarantees the informative center 32x32 block
//! survives every draw. Flips and per-channel normalization round out the
//! training-time pipeline.
//!
//! Every operation takes an explicit [`CounterRng`], and callers hand each
//! image its own substream, so augmentation results do not depend on
//! data-loader ordering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Side length of the informative center block in dataset patches.
pub const CENTER_SIDE: usize = 32;

/// Fill rule for the padded border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadFill {
    /// Zero (black) padding; the default.
    Constant,
    /// Mirror the image across its border.
    Reflect,
}

/// An RGB image patch with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub height: usize,
    pub width: usize,
    /// Row-major H x W x 3, values in [0, 255].
    pub pixels: Vec<f32>,
    /// 0 = negative, 1 = positive.
    pub label: u8,
    pub source_id: String,
}

impl ImagePatch {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        label: u8,
        source_id: impl Into<String>,
    ) -> Result<ImagePatch> {
        if pixels.len() != height * width * 3 {
            return Err(Error::data(format!(
                "image pixel buffer has {} values, expected {}x{}x3 = {}",
                pixels.len(),
                height,
                width,
                height * width * 3
            )));
        }
        if label > 1 {
            return Err(Error::data(format!("label {label} outside {{0,1}}")));
        }
        Ok(ImagePatch {
            height,
            width,
            pixels,
            label,
            source_id: source_id.into(),
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, chan: usize) -> f32 {
        self.pixels[(row * self.width + col) * 3 + chan]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, chan: usize, v: f32) {
        self.pixels[(row * self.width + col) * 3 + chan] = v;
    }
}

/// Augmentation parameters. `crop` is the output side length; the standard
/// geometry is pad 8, crop 96 on 96x96 patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: usize,
    pub h_flip_prob: f64,
    pub v_flip_prob: f64,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub seed: u64,
    pub fill: PadFill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pad: 8,
            crop: 96,
            h_flip_prob: 0.5,
            v_flip_prob: 0.5,
            channel_mean: [0.0; 3],
            channel_std: [1.0; 3],
            seed: 0,
            fill: PadFill::Constant,
        }
    }
}

impl AugmentConfig {
    /// Validate the value-level invariants (probabilities, stds).
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("h_flip_prob", self.h_flip_prob), ("v_flip_prob", self.v_flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config(format!(
                "channel_std {:?} must be strictly positive",
                self.channel_std
            )));
        }
        Ok(())
    }

    /// Validate crop geometry against an image side, including the
    /// center-preservation condition: for every drawable offset the
    /// centered 32x32 block must land fully inside the crop window.
    pub fn validate_geometry(&self, side: usize) -> Result<()> {
        let padded = side + 2 * self.pad;
        if self.crop > padded {
            return Err(Error::config(format!(
                "crop {} exceeds padded image side {padded}",
                self.crop
            )));
        }
        if self.crop == 0 {
            return Err(Error::config("crop must be positive".to_string()));
        }
        if side >= CENTER_SIDE {
            // Center block rows [a, b) in original coordinates. Worst-case
            // offsets are 0 and padded - crop.
            let a = (side - CENTER_SIDE) / 2;
            let b = a + CENTER_SIDE;
            let needed = (side + self.pad - a).max(b + self.pad);
            if self.crop < needed {
                return Err(Error::config(format!(
                    "crop {} with pad {} cannot preserve the center {CENTER_SIDE}x{CENTER_SIDE} \
                     block of a {side}-pixel image (needs at least {needed})",
                    self.crop, self.pad
                )));
            }
        }
        Ok(())
    }
}

/// Random center crop, also reporting the drawn (row, col) offsets.
/// The row offset is drawn first, then the column offset.
pub fn random_center_crop_with_offsets(
    img: &ImagePatch,
    cfg: &AugmentConfig,
    rng: &mut CounterRng,
) -> Result<((usize, usize), ImagePatch)> {
    cfg.validate_geometry(img.height.min(img.width))?;
    let pad = cfg.pad;
    let crop = cfg.crop;
    let max_dr = img.height + 2 * pad - crop;
    let max_dc = img.width + 2 * pad - crop;
    let dr = rng.gen_range(max_dr as u64 + 1) as usize;
    let dc = rng.gen_range(max_dc as u64 + 1) as usize;

    let mut out = ImagePatch::new(
        crop,
        crop,
        vec![0.0; crop * crop * 3],
        img.label,
        img.source_id.clone(),
    )?;
    for i in 0..crop {
        let pr = (dr + i) as isize - pad as isize; // row in original coords
        for j in 0..crop {
            let pc = (dc + j) as isize - pad as isize;
            for ch in 0..3 {
                let v = sample_padded(img, pr, pc, ch, cfg.fill);
                out.set(i, j, ch, v);
            }
        }
    }
    Ok(((dr, dc), out))
}

/// Random center crop; see [`random_center_crop_with_offsets`].
pub fn random_center_crop(
    img: &ImagePatch,
    cfg: &AugmentConfig,
    rng: &mut CounterRng,
) -> Result<ImagePatch> {
    random_center_crop_with_offsets(img, cfg, rng).map(|(_, p)| p)
}

fn sample_padded(img: &ImagePatch, row: isize, col: isize, chan: usize, fill: PadFill) -> f32 {
    let h = img.height as isize;
    let w = img.width as isize;
    let inside = row >= 0 && row < h && col >= 0 && col < w;
    match (inside, fill) {
        (true, _) => img.get(row as usize, col as usize, chan),
        (false, PadFill::Constant) => 0.0,
        (false, PadFill::Reflect) => {
            let r = reflect_index(row, h);
            let c = reflect_index(col, w);
            img.get(r, c, chan)
        }
    }
}

/// Mirror an out-of-range index back into [0, len): -1 -> 0, len -> len-1.
fn reflect_index(i: isize, len: isize) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= len {
            i = 2 * len - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Random horizontal/vertical flips. The horizontal decision is drawn
/// first, then the vertical one; the two are independent.
pub fn random_flip(
    img: &ImagePatch,
    h_prob: f64,
    v_prob: f64,
    rng: &mut CounterRng,
) -> Result<ImagePatch> {
    for (name, p) in [("h_prob", h_prob), ("v_prob", v_prob)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("{name} = {p} outside [0,1]")));
        }
    }
    let do_h = rng.gen_bool(h_prob);
    let do_v = rng.gen_bool(v_prob);
    Ok(flip(img, do_h, do_v))
}

/// Deterministic flip: `horizontal` reverses column order, `vertical`
/// reverses row order.
pub fn flip(img: &ImagePatch, horizontal: bool, vertical: bool) -> ImagePatch {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for i in 0..h {
        let si = if vertical { h - 1 - i } else { i };
        for j in 0..w {
            let sj = if horizontal { w - 1 - j } else { j };
            for ch in 0..3 {
                out.set(i, j, ch, img.get(si, sj, ch));
            }
        }
    }
    out
}

/// Per-channel normalization into a channel-first [3,H,W] tensor:
/// out[c,i,j] = (pixel[i,j,c] - mean[c]) / std[c].
pub fn normalize(img: &ImagePatch, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::config(format!(
            "normalize: std {std:?} must be strictly positive"
        )));
    }
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0f64; 3 * h * w];
    for ch in 0..3 {
        let inv = 1.0 / std[ch];
        let m = mean[ch];
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] = (img.get(i, j, ch) as f64 - m) * inv;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data, false)
}

/// Per-channel mean and population standard deviation over all pixels of
/// all images, computed in two passes. Zero-variance channels clamp to
/// std 1e-6 (with a warning on stderr).
pub fn channel_stats(dataset: &[ImagePatch]) -> Result<([f64; 3], [f64; 3])> {
    let total: usize = dataset.iter().map(|p| p.height * p.width).sum();
    if total < 2 {
        return Err(Error::usage(
            "channel_stats needs at least 2 pixels".to_string(),
        ));
    }
    let inv = 1.0 / total as f64;
    let mut mean = [0.0f64; 3];
    for img in dataset {
        let mut acc = [0.0f64; 3];
        for px in img.pixels.chunks_exact(3) {
            for ch in 0..3 {
                acc[ch] += px[ch] as f64;
            }
        }
        for ch in 0..3 {
            mean[ch] += acc[ch];
        }
    }
    for m in &mut mean {
        *m *= inv;
    }
    let mut var = [0.0f64; 3];
    for img in dataset {
        let mut acc = [0.0f64; 3];
        for px in img.pixels.chunks_exact(3) {
            for ch in 0..3 {
                let d = px[ch] as f64 - mean[ch];
                acc[ch] += d * d;
            }
        }
        for ch in 0..3 {
            var[ch] += acc[ch];
        }
    }
    let mut std = [0.0f64; 3];
    for ch in 0..3 {
        std[ch] = (var[ch] * inv).sqrt();
        if std[ch] < 1e-6 {
            eprintln!(
                "warning: channel {ch} has (near-)zero variance; clamping std to 1e-6"
            );
            std[ch] = 1e-6;
        }
    }
    Ok((mean, std))
}
