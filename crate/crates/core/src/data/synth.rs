use std::fs;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use rand::Rng;

use super::{scan_dataset, DatasetIndex};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Renders one synthetic image as interleaved RGB bytes.
///
/// Each class places a bright Gaussian blob in its own region: class 0 at
/// the centre, class 1 at a random corner, class 2 at a random edge
/// midpoint. The region families are closed under flips and quarter turns,
/// so geometric augmentation never changes the label. Background and blob
/// carry seeded noise.
pub fn synth_image(label: usize, size: usize, rng: &mut StreamRng) -> Vec<u8> {
    let s = size as f64;
    let (lo, mid, hi) = (0.2 * s, 0.5 * s, 0.8 * s);
    let (cx, cy) = match label {
        0 => (mid, mid),
        1 => [(lo, lo), (hi, lo), (lo, hi), (hi, hi)][rng.random_range(0..4)],
        _ => [(mid, lo), (hi, mid), (mid, hi), (lo, mid)][rng.random_range(0..4)],
    };
    let jitter = 0.04 * s;
    let cx = cx + rng.random_range(-jitter..=jitter);
    let cy = cy + rng.random_range(-jitter..=jitter);
    let sigma = 0.1 * s;
    let amp = rng.random_range(0.6..0.9);
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            let blob = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            for _ in 0..3 {
                let v = 0.1 + blob + rng.random_range(-0.05..0.05);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Writes `num_per_class` PNGs per class under `out/class{k}/` and returns
/// the scanned index. Output depends only on the arguments.
pub fn synth_generate(
    out: &Path,
    num_per_class: usize,
    num_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetIndex> {
    if num_per_class == 0 {
        return Err(Error::Config("synthetic class count must be at least 1".into()));
    }
    if !(1..=3).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic data supports 1 to 3 classes, got {num_classes}")));
    }
    if image_size < 4 {
        return Err(Error::Config(format!("synthetic image size {image_size} is below 4")));
    }
    for label in 0..num_classes {
        let dir = out.join(format!("class{label}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..num_per_class {
            let mut rng = rng::substream(seed, rng::SYNTH, &[label as u64, i as u64]);
            let bytes = synth_image(label, image_size, &mut rng);
            let img = RgbImage::from_raw(image_size as u32, image_size as u32, bytes).expect("buffer size");
            let path = dir.join(format!("{i:05}.png"));
            img.save_with_format(&path, ImageFormat::Png).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::io(&path, std::io::Error::other(other)),
            })?;
        }
    }
    Ok(scan_dataset(out)?.0)
}
