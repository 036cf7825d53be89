use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageSample, Split};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Probability of one rotation by `k·90°`, `k` uniform in `{1, 2, 3}`.
    pub p_rot90: f64,
    pub p_brightness_contrast: f64,
    pub p_median_blur: f64,
    pub brightness_delta_range: [f64; 2],
    pub contrast_factor_range: [f64; 2],
    pub median_kernel: usize,
    /// Overrides the run seed for augmentation draws.
    pub seed: Option<u64>,
    /// Pass test-split samples through untouched.
    pub train_only: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rot90: 0.5,
            p_brightness_contrast: 0.3,
            p_median_blur: 0.4,
            brightness_delta_range: [-0.2, 0.2],
            contrast_factor_range: [0.8, 1.2],
            median_kernel: 3,
            seed: None,
            train_only: true,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero.
    pub fn disabled() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rot90: 0.0,
            p_brightness_contrast: 0.0,
            p_median_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_rot90", self.p_rot90),
            ("p_brightness_contrast", self.p_brightness_contrast),
            ("p_median_blur", self.p_median_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        for (name, [lo, hi]) in [
            ("brightness_delta_range", self.brightness_delta_range),
            ("contrast_factor_range", self.contrast_factor_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("augment.{name} [{lo}, {hi}] is not an ordered range")));
            }
        }
        if self.median_kernel < 3 || self.median_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "augment.median_kernel {} must be odd and at least 3",
                self.median_kernel
            )));
        }
        Ok(())
    }
}

fn dims<T: Scalar>(img: &Tensor<T>) -> (usize, usize, usize) {
    let s = img.shape();
    assert_eq!(s.len(), 3, "augmentation expects H×W×C images, got {s:?}");
    (s[0], s[1], s[2])
}

fn remap<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<T> {
    let (_, w, c) = dims(img);
    let d = img.data();
    let mut out = Vec::with_capacity(d.len());
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            out.extend_from_slice(&d[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(&[out_h, out_w, c], out).expect("same element count")
}

pub(crate) fn hflip<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (h, w, _) = dims(img);
    remap(img, h, w, |y, x| (y, w - 1 - x))
}

pub(crate) fn vflip<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (h, w, _) = dims(img);
    remap(img, h, w, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise quarter turns.
pub(crate) fn rot90<T: Scalar>(img: &Tensor<T>, k: usize) -> Tensor<T> {
    let (h, w, _) = dims(img);
    match k % 4 {
        0 => img.clone(),
        1 => remap(img, w, h, |y, x| (x, w - 1 - y)),
        2 => remap(img, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => remap(img, w, h, |y, x| (h - 1 - x, y)),
    }
}

fn brightness_contrast<T: Scalar>(img: &Tensor<T>, brightness: f64, contrast: f64) -> Tensor<T> {
    let data = img
        .data()
        .iter()
        .map(|&p| T::of((contrast * (p.f64() - 0.5) + 0.5 + brightness).clamp(0.0, 1.0)))
        .collect();
    Tensor::new(img.shape(), data).expect("same shape")
}

/// Per-channel `kernel × kernel` median with edge replication.
pub fn median_filter<T: Scalar>(img: &Tensor<T>, kernel: usize) -> Tensor<T> {
    let (h, w, c) = dims(img);
    let r = (kernel / 2) as isize;
    let d = img.data();
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut out = Vec::with_capacity(d.len());
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..c {
                window.clear();
                for dy in -r..=r {
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                        window.push(d[(sy * w + sx) * c + ch]);
                    }
                }
                window.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                out.push(window[window.len() / 2]);
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

fn uniform_in(rng: &mut StreamRng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Applies each augmentation as an independent Bernoulli event, in the
/// order hflip, vflip, rotation, brightness/contrast, median blur.
/// Quarter and three-quarter turns of non-square images are skipped so the
/// shape is preserved.
pub fn augment_image<T: Scalar>(img: &Tensor<T>, cfg: &AugmentConfig, rng: &mut StreamRng) -> Tensor<T> {
    let mut out = img.clone();
    if rng.random_bool(cfg.p_hflip) {
        out = hflip(&out);
    }
    if rng.random_bool(cfg.p_vflip) {
        out = vflip(&out);
    }
    if rng.random_bool(cfg.p_rot90) {
        let k = rng.random_range(1..=3usize);
        let (h, w, _) = dims(&out);
        if h == w || k == 2 {
            out = rot90(&out, k);
        }
    }
    if rng.random_bool(cfg.p_brightness_contrast) {
        let b = uniform_in(rng, cfg.brightness_delta_range);
        let c = uniform_in(rng, cfg.contrast_factor_range);
        out = brightness_contrast(&out, b, c);
    }
    if rng.random_bool(cfg.p_median_blur) {
        out = median_filter(&out, cfg.median_kernel);
    }
    out
}

/// Augments a batch. Each sample draws from its own substream keyed by
/// `(epoch, sample index)`, so results do not depend on batch composition
/// or worker scheduling.
pub fn augment_batch<T: Scalar>(batch: &[ImageSample<T>], cfg: &AugmentConfig, seed: u64, epoch: u64) -> Vec<ImageSample<T>> {
    let seed = cfg.seed.unwrap_or(seed);
    batch
        .par_iter()
        .map(|s| {
            if cfg.train_only && s.split == Split::Test {
                return s.clone();
            }
            let mut rng = rng::substream(seed, rng::AUGMENT, &[epoch, s.index as u64]);
            ImageSample {
                pixels: augment_image(&s.pixels, cfg, &mut rng),
                ..s.clone()
            }
        })
        .collect()
}
