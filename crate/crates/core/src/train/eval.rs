//! Grounding evaluation: binarized maps, IoU against saliency masks and
//! GrabCut seed trimaps.

use crate::attention::{attend_with, AttentionConfig, AttentionMap, SignalMode};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::scene::{upsample_bilinear, Scene};
use crate::tensor::Tensor;

pub const BINARIZE_THRESHOLD: f64 = 0.5;
pub const SEED_FOREGROUND: f64 = 0.7;
pub const SEED_BACKGROUND: f64 = 0.1;

/// 1 where the entry is strictly greater than `threshold`, else 0.
pub fn binarize(map: &Tensor, threshold: f64) -> Tensor {
    let data = map.data().iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
    Tensor::new(map.shape(), data).expect("same shape")
}

/// `|a ∩ b| / |a ∪ b|` of two 0/1 masks; two empty masks score 1.
pub fn iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            what: "iou operand",
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Seed {
    Background = 0,
    Unknown = 128,
    Foreground = 255,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trimap {
    pub shape: Vec<usize>,
    pub seeds: Vec<Seed>,
}

impl Trimap {
    /// Seed codes scaled to [0, 1], so a PGM stores 0, 128 and 255.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.seeds.iter().map(|&s| s as u8 as f64 / 255.0).collect();
        Tensor::new(&self.shape, data).expect("trimap shape")
    }

    pub fn count(&self, seed: Seed) -> usize {
        self.seeds.iter().filter(|&&s| s == seed).count()
    }
}

/// Foreground where the map exceeds `hi`, background where it is below
/// `lo`, unknown elsewhere.
pub fn grabcut_seeds(map: &Tensor, hi: f64, lo: f64) -> Trimap {
    let seeds = map
        .data()
        .iter()
        .map(|&v| {
            if v > hi {
                Seed::Foreground
            } else if v < lo {
                Seed::Background
            } else {
                Seed::Unknown
            }
        })
        .collect();
    Trimap {
        shape: map.shape().to_vec(),
        seeds,
    }
}

/// The inference-time diagnostic: thresholded signal, no retained graph.
pub fn vda_diagnostic(encoder: &Encoder, scene: &Scene) -> Result<AttentionMap> {
    attend(encoder, scene, SignalMode::threshold())
}

/// Inference-mode attention map under any signal mode.
pub fn attend(encoder: &Encoder, scene: &Scene, mode: SignalMode) -> Result<AttentionMap> {
    let (map, _) = attend_with(encoder, encoder.params(), scene, mode, false, AttentionConfig::default())?;
    Ok(map)
}

/// Something that produces a full-resolution map in [0, 1] for a scene.
pub trait MapSource: Sync {
    fn full_map(&self, scene: &Scene) -> Result<Tensor>;
}

/// Softened VDA map of an encoder, bilinearly upsampled to image size.
pub struct VdaMaps<'a> {
    pub encoder: &'a Encoder,
    pub mode: SignalMode,
}

impl MapSource for VdaMaps<'_> {
    fn full_map(&self, scene: &Scene) -> Result<Tensor> {
        let map = attend(self.encoder, scene, self.mode)?;
        let side = scene.size();
        Ok(upsample_bilinear(&map.softened, side, side))
    }
}

/// Returns the ground-truth mask itself; scores IoU 1 by construction.
pub struct MaskOracle;

impl MapSource for MaskOracle {
    fn full_map(&self, scene: &Scene) -> Result<Tensor> {
        Ok(scene.saliency.clone())
    }
}

/// Per-scene IoU of the binarized map against the saliency mask.
pub fn scene_ious(source: &dyn MapSource, scenes: &[Scene], exec: Execution) -> Result<Vec<f64>> {
    exec.try_map(scenes, |scene| {
        let map = source.full_map(scene)?;
        iou(&binarize(&map, BINARIZE_THRESHOLD), &binarize(&scene.saliency, 0.5))
    })
}

/// Arithmetic mean of [`scene_ious`].
pub fn mean_iou(source: &dyn MapSource, scenes: &[Scene], exec: Execution) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ious = scene_ious(source, scenes, exec)?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
