//! Datasets on disk: `image_<i>.ppm`, `mask_<i>.pgm` and a tab-separated
//! manifest with one `index<TAB>image_path<TAB>mask_path` line per scene.

use std::fs;
use std::path::{Path, PathBuf};

use super::{read_image, write_image, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes `scenes` into `dir` (created if missing). Paths in the manifest
/// are relative to `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let image = format!("image_{i}.ppm");
        let mask = format!("mask_{i}.pgm");
        write_image(dir.join(&image), &scene.image)?;
        write_image(dir.join(&mask), &scene.saliency)?;
        manifest.push_str(&format!("{i}\t{image}\t{mask}\n"));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads the scenes listed in `dir`'s manifest, in manifest order. Relative
/// paths resolve against `dir`; masks are binarized at 0.5.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |line: usize, msg: String| Error::Format {
        kind: "manifest",
        path: path.clone(),
        msg: format!("line {line}: {msg}"),
    };
    let mut scenes = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [index, image, mask] = fields[..] else {
            return Err(bad(n + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        index
            .parse::<usize>()
            .map_err(|_| bad(n + 1, format!("bad index {index:?}")))?;
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                dir.join(p)
            }
        };
        let scene = Scene::from_image_and_mask(read_image(resolve(image))?, read_image(resolve(mask))?)
            .map_err(|e| bad(n + 1, e.to_string()))?;
        scenes.push(scene);
    }
    Ok(scenes)
}

impl Scene {
    /// A scene known only through its pixels: a `3×H×H` image and an `H×H`
    /// mask (binarized at 0.5). Object and background descriptions are empty.
    pub fn from_image_and_mask(image: Tensor, mask: Tensor) -> Result<Scene> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::Shape {
                what: "scene image (3×H×H)",
                expected: vec![3, s.get(1).copied().unwrap_or(0), s.get(1).copied().unwrap_or(0)],
                actual: s.to_vec(),
            });
        }
        if mask.shape() != [s[1], s[2]] {
            return Err(Error::Shape {
                what: "scene mask",
                expected: vec![s[1], s[2]],
                actual: mask.shape().to_vec(),
            });
        }
        let saliency = mask.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        let plane = s[1] * s[2];
        let mut mean = [0.0; 3];
        for (m, ch) in mean.iter_mut().zip(image.data().chunks(plane)) {
            *m = ch.iter().sum::<f64>() / plane as f64;
        }
        Ok(Scene {
            saliency: Tensor::new(mask.shape(), saliency)?,
            image,
            objects: Vec::new(),
            background: super::Background {
                mode: super::BackgroundMode::UniformNoise,
                mean,
                seed: 0,
            },
        })
    }
}
