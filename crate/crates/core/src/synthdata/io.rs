//! Dataset directories: one folder per set holding binary PPM patches and a
//! `manifest.json` with the labels.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use super::{scene_params, CropBox, Point, Sample, SampleSet};
use crate::eccnet::{GazeVector, PATCH_HEIGHT, PATCH_WIDTH};
use crate::error::{EccError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub file: String,
    pub gaze: [f32; 2],
    pub landmarks: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub crop_box: [f32; 4],
    pub samples: Vec<ManifestSample>,
}

fn file_err(path: &Path, detail: impl Into<String>) -> EccError {
    EccError::DatasetFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes a `[3, h, w]` image in `[0, 1]` as an 8-bit binary PPM.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let [3, h, w] = image.shape()[..] else {
        return Err(file_err(path, format!("expected an RGB image, got shape {:?}", image.shape())));
    };
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| file_err(path, e.to_string()))?;
    fs::write(path, out).map_err(|e| EccError::io(path, e))
}

/// Reads an 8-bit PPM into a `[3, h, w]` image with values `k / 255`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| EccError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| file_err(path, e.to_string()))?;
    if img.color() != ColorType::Rgb8 {
        return Err(file_err(path, format!("expected 8-bit RGB, got {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let raw = rgb.into_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        raw[p * 3 + ch] as f32 / 255.0
    }))
}

fn set_dir(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("set_{index:04}"))
}

pub fn write_dataset(sets: &[SampleSet], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (k, set) in sets.iter().enumerate() {
        let sd = set_dir(dir, k);
        fs::create_dir_all(&sd).map_err(|e| EccError::io(&sd, e))?;
        let mut samples = Vec::with_capacity(set.len());
        for (i, s) in set.samples.iter().enumerate() {
            let file = format!("g{i:03}.ppm");
            write_ppm(sd.join(&file), &s.image)?;
            samples.push(ManifestSample {
                file,
                gaze: [s.gaze.horizontal, s.gaze.vertical],
                landmarks: s.landmarks.to_vec(),
            });
        }
        let c = set.crop_box;
        let manifest = Manifest {
            seed: set.seed(),
            crop_box: [c.x, c.y, c.w, c.h],
            samples,
        };
        let path = sd.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| EccError::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EccError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e.to_string()))
}

fn read_set(sd: &Path) -> Result<SampleSet> {
    let mpath = sd.join("manifest.json");
    if !mpath.is_file() {
        return Err(file_err(&mpath, "missing manifest"));
    }
    let m = read_manifest(&mpath)?;
    let ppms = fs::read_dir(sd)
        .map_err(|e| EccError::io(sd, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ppm"))
        .count();
    if ppms != m.samples.len() {
        return Err(file_err(
            &mpath,
            format!("manifest lists {} samples but the folder holds {ppms} images", m.samples.len()),
        ));
    }
    let mut samples = Vec::with_capacity(m.samples.len());
    for ms in &m.samples {
        let ipath = sd.join(&ms.file);
        let image = read_ppm(&ipath)?;
        if image.shape() != [3, PATCH_HEIGHT, PATCH_WIDTH] {
            return Err(file_err(
                &ipath,
                format!(
                    "image is {}x{}, expected {PATCH_WIDTH}x{PATCH_HEIGHT}",
                    image.shape()[2],
                    image.shape()[1]
                ),
            ));
        }
        let landmarks: [Point; 6] = ms
            .landmarks
            .clone()
            .try_into()
            .map_err(|_| file_err(&mpath, format!("{}: expected 6 landmarks", ms.file)))?;
        samples.push(Sample {
            image,
            gaze: GazeVector::new(ms.gaze[0], ms.gaze[1]),
            landmarks,
        });
    }
    let [x, y, w, h] = m.crop_box;
    Ok(SampleSet {
        params: scene_params(m.seed),
        crop_box: CropBox { x, y, w, h },
        samples,
    })
}

/// Reads every set folder under `dir`, in name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SampleSet>> {
    let dir = dir.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| EccError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(file_err(dir, "no set folders found"));
    }
    dirs.iter().map(|d| read_set(d)).collect()
}
