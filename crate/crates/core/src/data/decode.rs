use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Bilinear resize of an interleaved `h × w × c` image with half-pixel
/// centers and edge clamping. Constant inputs stay exactly constant.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w * c, "resize_bilinear: buffer does not match {h}×{w}×{c}");
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(out_h, h);
    let cols = axis(out_w, w);
    let at = |y: usize, x: usize, k: usize| src[(y * w + x) * c + k];
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for k in 0..c {
                let top = at(y0, x0, k) + (at(y0, x1, k) - at(y0, x0, k)) * fx;
                let bottom = at(y1, x0, k) + (at(y1, x1, k) - at(y1, x0, k)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

fn preprocess<T: Scalar>(img: DynamicImage, size: usize) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = !img.color().has_color();
    let rgb: Vec<f64> = if gray {
        img.to_luma8().into_raw().into_iter().flat_map(|v| [f64::from(v); 3]).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(f64::from).collect()
    };
    let resized = if (h, w) == (size, size) {
        rgb
    } else {
        resize_bilinear(&rgb, h, w, 3, size, size)
    };
    let data = resized.into_iter().map(|v| T::of(v / 255.0)).collect();
    Tensor::new(&[size, size, 3], data).expect("positive size")
}

/// Decodes an 8-bit grayscale or colour image, resizes it to
/// `size × size`, replicates grayscale across three channels and scales to
/// `[0, 1]`.
pub fn decode_preprocess<T: Scalar>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, size).map_err(|e| match e {
        Error::Decode { reason, .. } => Error::Decode {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

/// [`decode_preprocess`] on an in-memory file.
pub fn decode_bytes<T: Scalar>(bytes: &[u8], size: usize) -> Result<Tensor<T>> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Decode {
            path: "<memory>".into(),
            reason: "empty image".into(),
        });
    }
    Ok(preprocess(img, size))
}
