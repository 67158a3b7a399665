//! Datasets: folder ingestion, flip augmentation and synthetic images with
//! known noise precision.

pub mod pnm;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

pub use synthetic::{gen_synthetic, GroundTruth, MeanFamily, SyntheticSpec};

use crate::color::{downsample_chroma, rgb_to_ycbcr, Plane, RgbImage, YccImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Validation,
}

/// One image in both representations: the RGB original and the modelled
/// YCbCr form with subsampled chroma.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: RgbImage,
    pub ycc: YccImage,
}

impl Sample {
    pub fn from_rgb(rgb: RgbImage, chroma_factor: usize) -> Result<Self> {
        let ycc = downsample_chroma(&rgb_to_ycbcr(&rgb), chroma_factor)?;
        Ok(Sample { rgb, ycc })
    }

    /// Left-right mirror of both representations.
    pub fn flipped(&self) -> Sample {
        Sample {
            rgb: self.rgb.flip_horizontal(),
            ycc: self.ycc.flip_horizontal(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Square side length shared by every sample.
    pub size: usize,
    pub grayscale: bool,
    pub split: Split,
    /// Files that could not be decoded during ingestion.
    pub skipped: Vec<PathBuf>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, grayscale: bool) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::config("dataset is empty"));
        };
        let size = first.ycc.height();
        if samples.iter().any(|s| s.ycc.height() != size || s.ycc.width() != size) {
            return Err(Error::config("dataset images differ in size or are not square"));
        }
        Ok(Dataset { samples, size, grayscale, split: Split::All, skipped: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Holds out the last `fraction` of the samples (at least one when the
    /// dataset has two or more).
    pub fn split_validation(self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("validation fraction {fraction} must be in [0, 1)")));
        }
        let n = self.samples.len();
        let held = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1 && fraction > 0.0), n - 1);
        let mut train = self;
        let val = train.samples.split_off(n - held);
        let validation = Dataset {
            samples: val,
            size: train.size,
            grayscale: train.grayscale,
            split: Split::Validation,
            skipped: Vec::new(),
        };
        train.split = Split::Train;
        Ok((train, validation))
    }
}

/// `augment_flip`: mirror when `coin` is true.
pub fn augment_flip(sample: &Sample, coin: bool) -> Sample {
    if coin {
        sample.flipped()
    } else {
        sample.clone()
    }
}

/// Largest centred square of the plane.
pub fn center_crop(plane: &Plane) -> Plane {
    let side = plane.height.min(plane.width);
    let (oy, ox) = ((plane.height - side) / 2, (plane.width - side) / 2);
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        let row = (oy + y) * plane.width + ox;
        data.extend_from_slice(&plane.data[row..row + side]);
    }
    Plane { height: side, width: side, data }
}

/// `weights[o]` = (source index, overlap / output extent) pairs.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < from {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Box-filter resampling: each output pixel is the area-weighted mean of the
/// source pixels it covers.
pub fn area_resample(plane: &Plane, height: usize, width: usize) -> Plane {
    let wy = area_weights(plane.height, height);
    let wx = area_weights(plane.width, width);
    let mut rows = vec![0.0; plane.height * width];
    for y in 0..plane.height {
        for (x, taps) in wx.iter().enumerate() {
            rows[y * width + x] = taps.iter().map(|(i, w)| w * plane.get(y, *i)).sum();
        }
    }
    let mut data = vec![0.0; height * width];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..width {
            data[y * width + x] = taps.iter().map(|(i, w)| w * rows[i * width + x]).sum();
        }
    }
    Plane { height, width, data }
}

fn crop_and_resize(img: &RgbImage, size: usize) -> RgbImage {
    let f = |p: &Plane| area_resample(&center_crop(p), size, size);
    RgbImage { r: f(&img.r), g: f(&img.g), b: f(&img.b) }
}

/// Loads `.pgm`/`.ppm`/`.pnm` files in filename order, centre-cropped and
/// area-resampled to `size`. Undecodable files are skipped with a warning.
/// The dataset is grayscale only when every file is.
pub fn load_folder(path: &Path, size: usize, limit: Option<usize>, chroma_factor: usize) -> Result<Dataset> {
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("pgm" | "ppm" | "pnm")
                )
        })
        .collect();
    files.sort();
    let limit = limit.unwrap_or(usize::MAX);
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut grayscale = true;
    for file in files {
        if samples.len() >= limit {
            break;
        }
        match pnm::read_pnm(&file) {
            Ok(img) => {
                grayscale &= img.grayscale;
                samples.push(Sample::from_rgb(crop_and_resize(&img.image, size), chroma_factor)?);
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", file.display());
                skipped.push(file);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::config(format!("no decodable images in {}", path.display())));
    }
    let mut ds = Dataset::new(samples, grayscale)?;
    ds.skipped = skipped;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Plane {
        Plane::new(h, w, (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn crop_takes_the_centre() {
        let c = center_crop(&ramp(2, 4));
        assert_eq!(c.data, vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn area_resample_preserves_mean_and_constants() {
        let p = ramp(80, 80);
        let r = area_resample(&p, 64, 64);
        assert!((r.mean() - p.mean()).abs() < 1e-9);
        let c = area_resample(&Plane::filled(7, 7, 3.5), 3, 3);
        assert!(c.data.iter().all(|v| (v - 3.5).abs() < 1e-12));
        // integer factors reduce to a block mean
        let b = area_resample(&ramp(4, 4), 2, 2);
        assert_eq!(b, ramp(4, 4).block_mean(2).unwrap());
    }

    #[test]
    fn flip_twice_is_identity() {
        let rgb = RgbImage::new(ramp(4, 4), ramp(4, 4), ramp(4, 4)).unwrap();
        let s = Sample::from_rgb(rgb, 2).unwrap();
        assert_eq!(augment_flip(&augment_flip(&s, true), true), s);
        assert_eq!(augment_flip(&s, false), s);
    }

    #[test]
    fn validation_split_holds_out_the_tail() {
        let rgb = RgbImage::new(ramp(2, 2), ramp(2, 2), ramp(2, 2)).unwrap();
        let samples = vec![Sample::from_rgb(rgb, 1).unwrap(); 20];
        let (t, v) = Dataset::new(samples, false).unwrap().split_validation(0.1).unwrap();
        assert_eq!((t.len(), v.len()), (18, 2));
        assert_eq!(v.split, Split::Validation);
    }
}
