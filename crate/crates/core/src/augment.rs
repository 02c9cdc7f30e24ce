//! Training augmentation on `(B, C, H, W)` images with pixel values in `[0, 1]`.
//!
//! Label-mixing policies return a [`MixedBatch`]; only the cross-entropy term
//! mixes labels, while teachers see the same mixed images as the student.

use aikd_autograd::Tensor;
use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, HardLabels, SoftDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraAugment {
    None,
    Cutout,
    Mixup,
    Cutmix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Pad-and-crop plus horizontal flip.
    pub standard: bool,
    pub pad: usize,
    pub hflip_prob: f64,
    pub extra: ExtraAugment,
    pub cutout_size: usize,
    pub mix_alpha: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { standard: true, pad: 4, hflip_prob: 0.5, extra: ExtraAugment::None, cutout_size: 16, mix_alpha: 1.0 }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("augment.hflip_prob", "must lie in [0, 1]"));
        }
        if self.extra == ExtraAugment::Cutout && self.cutout_size == 0 {
            return Err(Error::config("augment.cutout_size", "must be positive"));
        }
        if matches!(self.extra, ExtraAugment::Mixup | ExtraAugment::Cutmix) && !(self.mix_alpha > 0.0 && self.mix_alpha.is_finite()) {
            return Err(Error::config("augment.mix_alpha", "must be positive"));
        }
        Ok(())
    }
}

fn square_side(images: &Array4<f64>) -> Result<usize> {
    let (_, _, h, w) = images.dim();
    if h != w {
        return Err(Error::ShapeMismatch(format!("images must be square, got {h}x{w}")));
    }
    Ok(h)
}

/// Pads each image by `pad` zeros, crops back at the given top-left offsets
/// (each in `0..=2 pad`) and mirrors the images flagged in `flips`.
pub fn standard_augment_with(images: &Array4<f64>, pad: usize, offsets: &[(usize, usize)], flips: &[bool]) -> Result<Array4<f64>> {
    let side = square_side(images)?;
    let (b, c, _, _) = images.dim();
    if offsets.len() != b || flips.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} images, {} offsets, {} flips", offsets.len(), flips.len())));
    }
    let mut out = Array4::<f64>::zeros((b, c, side, side));
    let mut padded = ndarray::Array3::<f64>::zeros((c, side + 2 * pad, side + 2 * pad));
    for (i, (&(dy, dx), &flip)) in offsets.iter().zip(flips).enumerate() {
        if dy > 2 * pad || dx > 2 * pad {
            return Err(Error::InvalidArgument(format!("crop offset ({dy}, {dx}) exceeds padding {pad}")));
        }
        padded.fill(0.0);
        padded.slice_mut(s![.., pad..pad + side, pad..pad + side]).assign(&images.index_axis(Axis(0), i));
        let crop = padded.slice(s![.., dy..dy + side, dx..dx + side]);
        let mut dst = out.index_axis_mut(Axis(0), i);
        if flip {
            dst.assign(&crop.slice(s![.., .., ..;-1]));
        } else {
            dst.assign(&crop);
        }
    }
    Ok(out)
}

/// Random crop after zero padding and random horizontal flip.
pub fn standard_augment(images: &Array4<f64>, pad: usize, hflip_prob: f64, rng: &mut impl Rng) -> Result<Array4<f64>> {
    square_side(images)?;
    let b = images.dim().0;
    let mut offsets = Vec::with_capacity(b);
    let mut flips = Vec::with_capacity(b);
    for _ in 0..b {
        offsets.push((rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad)));
        flips.push(rng.gen::<f64>() < hflip_prob);
    }
    standard_augment_with(images, pad, &offsets, &flips)
}

/// Zeroes a `size`-sided square centered at each given `(row, col)`, clipped
/// at the borders. A size equal to the side zeroes the whole image.
pub fn cutout_at(images: &Array4<f64>, size: usize, centers: &[(usize, usize)]) -> Result<Array4<f64>> {
    let side = square_side(images)?;
    if size == 0 {
        return Err(Error::InvalidArgument("cutout size must be positive".into()));
    }
    if size > side {
        return Err(Error::InvalidArgument(format!("cutout size {size} exceeds image side {side}")));
    }
    if centers.len() != images.dim().0 {
        return Err(Error::ShapeMismatch(format!("{} centers for {} images", centers.len(), images.dim().0)));
    }
    let mut out = images.clone();
    for (i, &(cy, cx)) in centers.iter().enumerate() {
        let (y0, y1, x0, x1) = if size == side {
            (0, side, 0, side)
        } else {
            let half = size / 2;
            let lo = |c: usize| c.saturating_sub(half);
            let hi = |c: usize| (c + size - half).min(side);
            (lo(cy), hi(cy), lo(cx), hi(cx))
        };
        out.slice_mut(s![i, .., y0..y1, x0..x1]).fill(0.0);
    }
    Ok(out)
}

/// Cutout with centers uniform over the image.
pub fn cutout(images: &Array4<f64>, size: usize, rng: &mut impl Rng) -> Result<Array4<f64>> {
    let side = square_side(images)?;
    let centers: Vec<(usize, usize)> = (0..images.dim().0).map(|_| (rng.gen_range(0..side), rng.gen_range(0..side))).collect();
    cutout_at(images, size, &centers)
}

/// Augmented images with the two label sets to mix in the cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Array4<f64>,
    pub labels_a: HardLabels,
    pub labels_b: HardLabels,
    pub lam: f64,
    pub perm: Vec<usize>,
}

impl MixedBatch {
    /// An unmixed batch: `lam = 1`, `labels_b = labels_a`.
    pub fn plain(images: Array4<f64>, labels: HardLabels) -> Self {
        let perm = (0..labels.len()).collect();
        MixedBatch { images, labels_b: labels.clone(), labels_a: labels, lam: 1.0, perm }
    }
}

fn permuted(labels: &HardLabels, perm: &[usize]) -> Result<HardLabels> {
    HardLabels::new(perm.iter().map(|&p| labels.as_slice()[p]).collect(), labels.num_classes())
}

fn check_perm(perm: &[usize], b: usize) -> Result<()> {
    let mut seen = vec![false; b];
    if perm.len() != b || perm.iter().any(|&p| p >= b || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!("not a permutation of 0..{b}")));
    }
    Ok(())
}

fn check_batch(images: &Array4<f64>, labels: &HardLabels) -> Result<()> {
    if images.dim().0 != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} images vs {} labels", images.dim().0, labels.len())));
    }
    Ok(())
}

/// `lam x + (1 - lam) x[perm]`.
pub fn mixup_with(images: &Array4<f64>, labels: &HardLabels, lam: f64, perm: &[usize]) -> Result<MixedBatch> {
    check_batch(images, labels)?;
    check_perm(perm, labels.len())?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!("lam {lam} outside [0, 1]")));
    }
    let other = images.select(Axis(0), perm);
    let mut mixed = images.clone();
    mixed.zip_mut_with(&other, |a, &b| *a = lam * *a + (1.0 - lam) * b);
    Ok(MixedBatch { images: mixed, labels_b: permuted(labels, perm)?, labels_a: labels.clone(), lam, perm: perm.to_vec() })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("mix alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn draw_lam_perm(b: usize, alpha: f64, rng: &mut impl Rng) -> (f64, Vec<usize>) {
    let lam = Beta::new(alpha, alpha).expect("positive alpha").sample(rng);
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    (lam, perm)
}

/// Mixup with `lam ~ Beta(alpha, alpha)` and a random permutation; a single
/// image passes through unchanged.
pub fn mixup(images: &Array4<f64>, labels: &HardLabels, alpha: f64, rng: &mut impl Rng) -> Result<MixedBatch> {
    check_alpha(alpha)?;
    check_batch(images, labels)?;
    if labels.len() < 2 {
        return Ok(MixedBatch::plain(images.clone(), labels.clone()));
    }
    let (lam, perm) = draw_lam_perm(labels.len(), alpha, rng);
    mixup_with(images, labels, lam, &perm)
}

/// Pastes rows `y0..y1`, columns `x0..x1` from the permuted images; `lam` is
/// one minus the pasted area fraction.
pub fn cutmix_box(images: &Array4<f64>, labels: &HardLabels, perm: &[usize], bbox: (usize, usize, usize, usize)) -> Result<MixedBatch> {
    check_batch(images, labels)?;
    check_perm(perm, labels.len())?;
    let (_, _, h, w) = images.dim();
    let (y0, y1, x0, x1) = bbox;
    if y0 > y1 || x0 > x1 || y1 > h || x1 > w {
        return Err(Error::InvalidArgument(format!("box {bbox:?} outside {h}x{w}")));
    }
    let other = images.select(Axis(0), perm);
    let mut mixed = images.clone();
    mixed.slice_mut(s![.., .., y0..y1, x0..x1]).assign(&other.slice(s![.., .., y0..y1, x0..x1]));
    let lam = 1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64;
    Ok(MixedBatch { images: mixed, labels_b: permuted(labels, perm)?, labels_a: labels.clone(), lam, perm: perm.to_vec() })
}

/// Box of side ratio `sqrt(1 - lam)` centered at `(cy, cx)`, clipped.
pub fn cutmix_region(h: usize, w: usize, lam: f64, cy: usize, cx: usize) -> (usize, usize, usize, usize) {
    let ratio = (1.0 - lam).max(0.0).sqrt();
    let ch = (h as f64 * ratio) as usize;
    let cw = (w as f64 * ratio) as usize;
    let clip = |c: usize, len: usize, max: usize| (c.saturating_sub(len / 2), (c + len / 2).min(max));
    let (y0, y1) = clip(cy, ch, h);
    let (x0, x1) = clip(cx, cw, w);
    (y0, y1, x0, x1)
}

/// CutMix with `lam ~ Beta(alpha, alpha)`; `lam` is recomputed from the
/// clipped box.
pub fn cutmix(images: &Array4<f64>, labels: &HardLabels, alpha: f64, rng: &mut impl Rng) -> Result<MixedBatch> {
    check_alpha(alpha)?;
    check_batch(images, labels)?;
    if labels.len() < 2 {
        return Ok(MixedBatch::plain(images.clone(), labels.clone()));
    }
    let (_, _, h, w) = images.dim();
    let (lam, perm) = draw_lam_perm(labels.len(), alpha, rng);
    let (cy, cx) = (rng.gen_range(0..h), rng.gen_range(0..w));
    cutmix_box(images, labels, &perm, cutmix_region(h, w, lam, cy, cx))
}

/// `lam CE(labels_a) + (1 - lam) CE(labels_b)`.
pub fn mixed_ce(student_probs: &SoftDistribution, mixed: &MixedBatch) -> Result<Tensor> {
    let a = cross_entropy(&mixed.labels_a, student_probs)?;
    if mixed.lam == 1.0 {
        return Ok(a);
    }
    let b = cross_entropy(&mixed.labels_b, student_probs)?;
    Ok(a.scale(mixed.lam).add(&b.scale(1.0 - mixed.lam)))
}

/// Full training-time pipeline: standard augmentation, then the extra policy.
pub fn apply_policy(images: &Array4<f64>, labels: &HardLabels, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<MixedBatch> {
    check_batch(images, labels)?;
    let base = if policy.standard {
        standard_augment(images, policy.pad, policy.hflip_prob, rng)?
    } else {
        images.clone()
    };
    match policy.extra {
        ExtraAugment::None => Ok(MixedBatch::plain(base, labels.clone())),
        ExtraAugment::Cutout => {
            let side = square_side(&base)?;
            Ok(MixedBatch::plain(cutout(&base, policy.cutout_size.min(side), rng)?, labels.clone()))
        }
        ExtraAugment::Mixup => mixup(&base, labels, policy.mix_alpha, rng),
        ExtraAugment::Cutmix => cutmix(&base, labels, policy.mix_alpha, rng),
    }
}
