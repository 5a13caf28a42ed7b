//! Synthetic scenes with exact ground-truth saliency masks.
//!
//! Every scene is a function of `(seed, index)` only: the generator seeds a
//! ChaCha8 stream with the dataset seed and selects stream `index`, so scenes
//! can be generated in any order or in parallel.

mod dataset;
mod netpbm;
mod resample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::tensor::Tensor;

pub use dataset::{read_dataset, write_dataset, MANIFEST_FILE};
pub use netpbm::{read_image, write_image};
pub use resample::{downsample_mask, upsample_bilinear};

/// Minimum per-channel distance between an object colour and the background
/// mean colour.
pub const MIN_CONTRAST: f64 = 0.3;
/// Half-width of the background's per-pixel deviation from its mean colour.
pub const BACKGROUND_SPREAD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Footprint area in pixels for a shape of side/diameter `size`.
    pub fn area(self, size: f64) -> f64 {
        match self {
            ShapeKind::Disk => std::f64::consts::PI * size * size / 4.0,
            ShapeKind::Square => size * size,
            ShapeKind::Triangle => size * size / 2.0,
        }
    }

    /// Whether the point `(y, x)` lies in the footprint centred at `center`.
    /// Triangles point up: apex at the top edge, base along the bottom edge.
    pub fn contains(self, center: (f64, f64), size: f64, y: f64, x: f64) -> bool {
        let (cy, cx) = center;
        let half = size / 2.0;
        match self {
            ShapeKind::Disk => (y - cy).powi(2) + (x - cx).powi(2) <= half * half,
            ShapeKind::Square => (y - cy).abs() <= half && (x - cx).abs() <= half,
            ShapeKind::Triangle => {
                let top = cy - half;
                y >= top && y <= cy + half && (x - cx).abs() <= (y - top) / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    /// `(row, col)` in continuous pixel coordinates; pixel `(r, c)` has its
    /// centre at `(r + 0.5, c + 0.5)`.
    pub center: (f64, f64),
    pub size: f64,
}

impl SceneObject {
    /// Half-open pixel rows `[r0, r1)` and columns `[c0, c1)` the footprint
    /// can touch.
    pub fn pixel_bounds(&self, side: usize) -> (usize, usize, usize, usize) {
        let half = self.size / 2.0;
        let lo = |v: f64| ((v - half - 0.5).floor().max(0.0)) as usize;
        let hi = |v: f64| (((v + half - 0.5).ceil() + 1.0).max(0.0) as usize).min(side);
        (lo(self.center.0), hi(self.center.0), lo(self.center.1), hi(self.center.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    UniformNoise,
    SmoothGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub mode: BackgroundMode,
    pub mean: [f64; 3],
    /// Seeds the per-pixel noise or the gradient direction.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub saliency: Tensor,
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side/diameter range in pixels, inclusive.
    pub min_size: f64,
    pub max_size: f64,
    pub background: BackgroundMode,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            min_objects: 1,
            max_objects: 3,
            min_size: 7.0,
            max_size: 13.0,
            background: BackgroundMode::UniformNoise,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return bad(format!(
                "object count range {}..{} must lie within 1..3",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return bad(format!("size range {}..{} is invalid", self.min_size, self.max_size));
        }
        if self.max_size + 2.0 > self.image_size as f64 {
            return bad(format!(
                "objects up to {} px do not fit a {} px frame",
                self.max_size, self.image_size
            ));
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn object_color(rng: &mut ChaCha8Rng, background: &[f64; 3]) -> [f64; 3] {
    let mut color = [0.0; 3];
    for (c, &bg) in color.iter_mut().zip(background) {
        let below = (bg - MIN_CONTRAST).max(0.0);
        let above = (1.0 - bg - MIN_CONTRAST).max(0.0);
        let t = rng.gen_range(0.0..below + above);
        *c = if t < below { t } else { bg + MIN_CONTRAST + (t - below) };
    }
    color
}

fn boxes_overlap(a: &SceneObject, b: &SceneObject) -> bool {
    // One pixel of clearance between footprints.
    let reach = (a.size + b.size) / 2.0 + 1.0;
    (a.center.0 - b.center.0).abs() < reach && (a.center.1 - b.center.1).abs() < reach
}

/// Deterministic scene `index` of the dataset described by `config`.
pub fn generate_scene(config: &DataConfig, index: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, index);
    let side = config.image_size as f64;
    let mean = [0, 1, 2].map(|_| rng.gen_range(0.2..0.8));
    let background = Background {
        mode: config.background,
        mean,
        seed: rng.gen(),
    };
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let size = rng.gen_range(config.min_size..=config.max_size).round();
        let shape = match rng.gen_range(0..3) {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let half = size / 2.0;
        let center = (rng.gen_range(half..=side - half), rng.gen_range(half..=side - half));
        let color = object_color(&mut rng, &mean);
        let candidate = SceneObject {
            shape,
            color,
            center,
            size,
        };
        if objects.iter().all(|o| !boxes_overlap(o, &candidate)) {
            objects.push(candidate);
        }
    }
    Ok(render(config.image_size, &background, objects))
}

/// Scenes `0..count` of a dataset.
pub fn generate_dataset(config: &DataConfig, count: usize, exec: Execution) -> Result<Vec<Scene>> {
    let indices: Vec<u64> = (0..count as u64).collect();
    exec.try_map(&indices, |&i| generate_scene(config, i))
}

fn background_value(bg: &Background, side: usize, ramp: (f64, f64), noise: &mut ChaCha8Rng, r: usize, c: usize) -> [f64; 3] {
    match bg.mode {
        BackgroundMode::UniformNoise => {
            bg.mean.map(|m| m + noise.gen_range(-BACKGROUND_SPREAD..=BACKGROUND_SPREAD))
        }
        BackgroundMode::SmoothGradient => {
            let centre = (side as f64) / 2.0;
            let y = (r as f64 + 0.5 - centre) / centre;
            let x = (c as f64 + 0.5 - centre) / centre;
            let t = ((y * ramp.0 + x * ramp.1) / std::f64::consts::SQRT_2).clamp(-1.0, 1.0);
            bg.mean.map(|m| m + BACKGROUND_SPREAD * t)
        }
    }
}

/// Paints `objects` over `background`; saliency is 1 exactly on their union.
pub fn render(side: usize, background: &Background, objects: Vec<SceneObject>) -> Scene {
    let plane = side * side;
    let mut image = vec![0.0; 3 * plane];
    let mut saliency = vec![0.0; plane];
    let mut noise = ChaCha8Rng::seed_from_u64(background.seed);
    let angle = noise.gen_range(0.0..std::f64::consts::TAU);
    let ramp = (angle.sin(), angle.cos());
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let bg = background_value(background, side, ramp, &mut noise, r, c);
            let hit = objects.iter().find(|o| o.shape.contains(o.center, o.size, y, x));
            let px = match hit {
                Some(o) => {
                    saliency[r * side + c] = 1.0;
                    o.color
                }
                None => bg,
            };
            for ch in 0..3 {
                image[ch * plane + r * side + c] = px[ch];
            }
        }
    }
    Scene {
        image: Tensor::plain(vec![3, side, side], image),
        saliency: Tensor::plain(vec![side, side], saliency),
        objects,
        background: background.clone(),
    }
}

impl Scene {
    pub fn size(&self) -> usize {
        self.saliency.shape()[0]
    }

    /// The same object layout over a background re-drawn from `seed`.
    pub fn with_background_seed(&self, seed: u64) -> Scene {
        let bg = Background {
            seed,
            ..self.background.clone()
        };
        render(self.size(), &bg, self.objects.clone())
    }

    /// The background alone, without any objects.
    pub fn background_only(&self) -> Scene {
        render(self.size(), &self.background, Vec::new())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    /// Added to every channel, then clamped to [0, 1].
    pub brightness: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        brightness: 0.0,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Augmentation {
            flip: rng.gen_bool(0.5),
            brightness: rng.gen_range(-0.1..=0.1),
        }
    }

    pub fn apply(&self, scene: &Scene) -> Scene {
        let side = scene.size();
        let flip = |data: &[f64]| -> Vec<f64> {
            if !self.flip {
                return data.to_vec();
            }
            data.chunks(side).flat_map(|row| row.iter().rev().copied()).collect()
        };
        let mut image = flip(scene.image.data());
        if self.brightness != 0.0 {
            for v in &mut image {
                *v = (*v + self.brightness).clamp(0.0, 1.0);
            }
        }
        let objects = scene
            .objects
            .iter()
            .map(|o| {
                let mut o = o.clone();
                if self.flip {
                    o.center.1 = side as f64 - o.center.1;
                }
                o.color = o.color.map(|c| (c + self.brightness).clamp(0.0, 1.0));
                o
            })
            .collect();
        Scene {
            image: Tensor::plain(scene.image.shape().to_vec(), image),
            saliency: Tensor::plain(scene.saliency.shape().to_vec(), flip(scene.saliency.data())),
            objects,
            background: scene.background.clone(),
        }
    }
}

/// Random horizontal flip and brightness jitter in [−0.1, 0.1], applied to
/// image and mask alike.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    Augmentation::sample(seed).apply(scene)
}

/// Number of 4-connected components of pixels with value > 0.5.
pub fn connected_components(mask: &Tensor) -> usize {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let on: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let mut seen = vec![false; on.len()];
    let mut count = 0;
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if on[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}
