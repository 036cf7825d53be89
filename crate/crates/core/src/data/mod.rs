//! Dataset catalogue, preprocessing, splitting and augmentation.
//!
//! A dataset is a directory with one subdirectory per class holding PNG or
//! JPEG files. Class indices follow the lexicographic order of the class
//! directory names.

mod augment;
mod decode;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment_batch, augment_image, median_filter, AugmentConfig};
pub use decode::{decode_bytes, decode_preprocess, resize_bilinear};
pub use synth::{synth_generate, synth_image};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}, expected train or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
    /// `None` until [`stratified_split`] assigns one.
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Record count per class index.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn split_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in self.records.iter().filter(|r| r.split == Some(split)) {
            counts[r.label] += 1;
        }
        counts
    }

    /// Positions in `records` of every record tagged `split`.
    pub fn split_positions(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == Some(split)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<Skipped>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Catalogues `root`. Files whose header cannot be read are reported in the
/// [`SkipReport`] instead of failing the scan; non-image files are ignored.
pub fn scan_dataset(root: &Path) -> Result<(DatasetIndex, SkipReport)> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::data(format!("{} has no class subdirectories", root.display())));
    }
    let mut index = DatasetIndex::default();
    let mut report = SkipReport::default();
    for dir in class_dirs {
        let class_name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::data(format!("class directory {} is not valid UTF-8", dir.display())))?
            .to_string();
        let label = index.classes.len();
        let files: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        let probed: Vec<std::result::Result<(), String>> = files
            .par_iter()
            .map(|p| {
                image::ImageReader::open(p)
                    .map_err(|e| e.to_string())?
                    .with_guessed_format()
                    .map_err(|e| e.to_string())?
                    .into_dimensions()
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            })
            .collect();
        let mut kept = 0;
        for (path, probe) in files.into_iter().zip(probed) {
            match probe {
                Ok(()) => {
                    kept += 1;
                    index.records.push(Record {
                        path,
                        label,
                        class_name: class_name.clone(),
                        split: None,
                    });
                }
                Err(reason) => report.skipped.push(Skipped { path, reason }),
            }
        }
        if kept == 0 {
            return Err(Error::data(format!("class directory {} holds no readable images", dir.display())));
        }
        index.classes.push(class_name);
    }
    Ok((index, report))
}

/// Training count for a class of `n` records: `round(ratio·n)`, kept within
/// `[1, n−1]` so both splits see every class.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

/// Tags every record as train or test, class by class, using a seeded
/// shuffle of each class's records.
pub fn stratified_split(index: &DatasetIndex, ratio: f64, seed: u64) -> Result<DatasetIndex> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie strictly between 0 and 1")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in index.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut out = index.clone();
    for (label, mut members) in by_class {
        let name = index.classes.get(label).map(String::as_str).unwrap_or("?");
        if members.len() < 2 {
            return Err(Error::data(format!(
                "class {name} has {} record(s); a split needs at least 2",
                members.len()
            )));
        }
        let n_train = train_count(members.len(), ratio);
        members.shuffle(&mut rng::substream(seed, rng::SPLIT, &[label as u64]));
        for (k, &i) in members.iter().enumerate() {
            out.records[i].split = Some(if k < n_train { Split::Train } else { Split::Test });
        }
    }
    Ok(out)
}

/// One decoded, preprocessed image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample<T> {
    /// `[H × W × 3]`, values in `[0, 1]`.
    pub pixels: Tensor<T>,
    pub label: usize,
    /// Position of the source record in its [`DatasetIndex`].
    pub index: usize,
    pub split: Split,
}

/// Decodes every record tagged `split`, in index order.
pub fn load_split<T: Scalar>(index: &DatasetIndex, split: Split, image_size: usize) -> Result<Vec<ImageSample<T>>> {
    index
        .split_positions(split)
        .into_par_iter()
        .map(|i| {
            let r = &index.records[i];
            Ok(ImageSample {
                pixels: decode_preprocess(&r.path, image_size)?,
                label: r.label,
                index: i,
                split,
            })
        })
        .collect()
}
