//! Visual difference attention and the differentiable difference-attention
//! loss.
//!
//! The pipeline for one scene:
//!
//! 1. mask the tight bounding box of the salient pixels,
//! 2. encode original and masked image, `f_d = f − f_m`,
//! 3. reduce to a scalar signal `s` (thresholded sum or `fᵀ f_d`),
//! 4. `G_i = ∂s/∂A_i`, `α_i = mean(G_i)`, `M = ReLU(Σ α_i A_i)` scaled to max 1,
//! 5. `M̃ = σ(α (M − β))` and the loss `1 − cos(M̃, S)` against the saliency
//!    mask pooled to the activation grid.
//!
//! With `retain_graph` the gradient in step 4 is built as part of the graph,
//! so the loss can be differentiated wrt encoder parameters through both `A`
//! and `G`.

use crate::encoder::{ActivationStack, Encoder};
use crate::error::{Error, Result};
use crate::scene::{downsample_mask, Scene};
use crate::tensor::{backward, Tensor, TensorError};

pub const DEFAULT_ALPHA: f64 = 16.0;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.25;
/// Lower bound on each norm in the cosine loss.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillPolicy {
    /// Per-channel mean of the original image.
    ChannelMean,
}

/// Masked rectangle, rows `row0..row1` and columns `col0..col1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub fill: FillPolicy,
}

impl MaskSpec {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// Replaces the tight bounding box of pixels with saliency > 0.5 by the
/// image's per-channel mean.
pub fn mask_salient_region(image: &Tensor, saliency: &Tensor) -> Result<(Tensor, MaskSpec)> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Shape {
            what: "masked image",
            expected: vec![3, saliency.shape()[0], saliency.shape()[1]],
            actual: image.shape().to_vec(),
        });
    };
    if saliency.shape() != [h, w] {
        return Err(Error::Shape {
            what: "saliency map",
            expected: vec![h, w],
            actual: saliency.shape().to_vec(),
        });
    }
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, &v) in saliency.data().iter().enumerate() {
        if v > 0.5 {
            let (r, col) = (i / w, i % w);
            bounds = Some(match bounds {
                None => (r, col, r + 1, col + 1),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(col), r1.max(r + 1), c1.max(col + 1)),
            });
        }
    }
    let (row0, col0, row1, col1) = bounds.ok_or(Error::NoSalientRegion)?;
    let plane = h * w;
    let mut data = image.to_vec();
    for ch in 0..c {
        let channel = &image.data()[ch * plane..(ch + 1) * plane];
        let mean = channel.iter().sum::<f64>() / plane as f64;
        for r in row0..row1 {
            data[ch * plane + r * w + col0..ch * plane + r * w + col1].fill(mean);
        }
    }
    let spec = MaskSpec {
        row0,
        col0,
        row1,
        col1,
        fill: FillPolicy::ChannelMean,
    };
    Ok((Tensor::new(image.shape(), data)?, spec))
}

/// `f_d = f − f_m`.
pub fn difference_vector(f: &Tensor, f_masked: &Tensor) -> Result<Tensor> {
    Ok(f.sub(f_masked)?)
}

/// 0/1 mask selecting the `ceil(keep_fraction · k)` largest-magnitude
/// entries; ties go to the lower index.
pub fn dominant_selection(f_d: &Tensor, keep_fraction: f64) -> Vec<f64> {
    let k = f_d.len();
    let keep = ((keep_fraction * k as f64).ceil() as usize).clamp(1, k);
    let mut order: Vec<usize> = (0..k).collect();
    let d = f_d.data();
    order.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![0.0; k];
    for &i in &order[..keep] {
        mask[i] = 1.0;
    }
    mask
}

/// `f̄_d`: `f_d` with all but its dominant entries zeroed. The selection is
/// treated as a constant for differentiation.
pub fn dominant_difference(f_d: &Tensor, keep_fraction: f64) -> Result<Tensor> {
    let mask = Tensor::new(f_d.shape(), dominant_selection(f_d, keep_fraction))?;
    Ok(f_d.mul(&mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalMode {
    /// `s = 1ᵀ f̄_d`, the diagnostic signal.
    Threshold { keep_fraction: f64 },
    /// `s = fᵀ f_d`, the differentiable training signal.
    Dot,
}

impl SignalMode {
    pub const fn threshold() -> Self {
        SignalMode::Threshold {
            keep_fraction: DEFAULT_KEEP_FRACTION,
        }
    }
}

pub fn vda_signal(f: &Tensor, f_masked: &Tensor, mode: SignalMode) -> Result<Tensor> {
    let f_d = difference_vector(f, f_masked)?;
    Ok(match mode {
        SignalMode::Threshold { keep_fraction } => dominant_difference(&f_d, keep_fraction)?.sum()?,
        SignalMode::Dot => f.dot(&f_d)?,
    })
}

/// Raw map `M = ReLU(Σ_i mean(∂s/∂A_i) · A_i)`, divided by its maximum
/// (left at zero if the maximum is zero). Shape `p×q`.
pub fn attention_map(signal: &Tensor, activations: &ActivationStack, retain_graph: bool) -> Result<Tensor> {
    let a = activations.tensor();
    let (n, p, q) = (activations.channels(), activations.height(), activations.width());
    let grads = backward(signal, std::slice::from_ref(a), retain_graph)?;
    let weights = grads[0].channel_mean()?;
    let a_used = if retain_graph { a.clone() } else { a.detach() };
    let weighted = a_used.reshape(&[n, p * q])?.mattvec(&weights)?.reshape(&[p, q])?.relu()?;
    normalize_max(&weighted)
}

fn normalize_max(map: &Tensor) -> Result<Tensor> {
    let max = map.max_all()?;
    let m = max.item();
    if m > 0.0 && (1.0 / m).is_finite() {
        Ok(map.scale(&max.powf(-1.0)?)?)
    } else {
        Ok(map.clone())
    }
}

/// `σ(alpha · (M − beta))` elementwise.
pub fn soften(raw: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    Ok(raw.add_const(-beta)?.mul_const(alpha)?.sigmoid()?)
}

#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub raw: Tensor,
    pub softened: Tensor,
    pub alpha: f64,
    pub beta: f64,
}

impl AttentionMap {
    pub fn from_raw(raw: Tensor, alpha: f64, beta: f64) -> Result<Self> {
        let softened = soften(&raw, alpha, beta)?;
        Ok(Self {
            raw,
            softened,
            alpha,
            beta,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            raw: self.raw.detach(),
            softened: self.softened.detach(),
            ..*self
        }
    }
}

fn guarded_norm(t: &Tensor) -> Result<Tensor, TensorError> {
    let norm = t.l2_norm()?;
    if norm.item() < NORM_GUARD {
        Ok(Tensor::scalar(NORM_GUARD))
    } else {
        Ok(norm)
    }
}

/// `1 − ⟨M̃, S⟩ / (‖M̃‖ ‖S‖)` over the flattened maps, each norm bounded
/// below by [`NORM_GUARD`].
pub fn dida_loss(softened: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inner = softened.dot(target)?;
    let denom = guarded_norm(softened)?.mul(&guarded_norm(target)?)?;
    Ok(inner.mul(&denom.powf(-1.0)?)?.neg()?.add_const(1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

/// Result of one differentiable pass.
#[derive(Debug, Clone)]
pub struct DidaOutput {
    pub loss: Tensor,
    pub map: AttentionMap,
    pub mask: MaskSpec,
    /// The saliency mask pooled to the activation grid.
    pub target: Tensor,
}

/// Attention map of `scene` under `mode`, computed with the given parameter
/// tensors. Linked parameters plus `retain_graph` give a map that is
/// differentiable wrt them.
pub fn attend_with(
    encoder: &Encoder,
    params: &[Tensor],
    scene: &Scene,
    mode: SignalMode,
    retain_graph: bool,
    config: AttentionConfig,
) -> Result<(AttentionMap, MaskSpec)> {
    let (masked, spec) = mask_salient_region(&scene.image, &scene.saliency)?;
    let original = encoder.forward_with(params, &scene.image)?;
    let masked_out = encoder.forward_with(params, &masked)?;
    let signal = vda_signal(&original.features, &masked_out.features, mode)?;
    let raw = attention_map(&signal, &original.activations, retain_graph)?;
    Ok((AttentionMap::from_raw(raw, config.alpha, config.beta)?, spec))
}

/// The full training pass: dot-mode signal, map with retained graph,
/// softening and the cosine loss.
pub fn dida_forward_with(
    encoder: &Encoder,
    params: &[Tensor],
    scene: &Scene,
    config: AttentionConfig,
) -> Result<DidaOutput> {
    let (map, mask) = attend_with(encoder, params, scene, SignalMode::Dot, true, config)?;
    let p = map.raw.shape();
    let target = downsample_mask(&scene.saliency, p[0], p[1]);
    let loss = dida_loss(&map.softened, &target)?;
    Ok(DidaOutput {
        loss,
        map,
        mask,
        target,
    })
}

/// [`dida_forward_with`] on fresh parameter variables, returning them so the
/// caller can take gradients.
pub fn dida_forward(encoder: &Encoder, scene: &Scene) -> Result<(DidaOutput, Vec<Tensor>)> {
    let params = encoder.variables();
    let out = dida_forward_with(encoder, &params, scene, AttentionConfig::default())?;
    Ok((out, params))
}

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// In-batch normalized-temperature cross-entropy. `view_a[i]` and `view_b[i]`
/// are the positive pair; every other vector in the batch is a negative.
pub fn contrastive_loss(view_a: &[Tensor], view_b: &[Tensor], temperature: f64) -> Result<Tensor> {
    let n = view_a.len();
    if n < 2 || view_b.len() != n {
        return Err(Error::InvalidConfig(format!(
            "contrastive loss needs two equal batches of at least 2, got {} and {}",
            n,
            view_b.len()
        )));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    let z: Vec<Tensor> = view_a
        .iter()
        .chain(view_b)
        .map(|v| {
            let norm = guarded_norm(v)?;
            Ok(v.scale(&norm.powf(-1.0)?)?)
        })
        .collect::<Result<_>>()?;
    let inv_t = 1.0 / temperature;
    let mut total: Option<Tensor> = None;
    for i in 0..2 * n {
        let positive = (i + n) % (2 * n);
        let mut denom: Option<Tensor> = None;
        let mut pos_logit = None;
        for (j, zj) in z.iter().enumerate() {
            if j == i {
                continue;
            }
            let logit = z[i].dot(zj)?.mul_const(inv_t)?;
            // Cosines are at most 1, so shifting by 1/τ keeps exp ≤ 1.
            let e = logit.add_const(-inv_t)?.exp()?;
            denom = Some(match denom {
                Some(d) => d.add(&e)?,
                None => e,
            });
            if j == positive {
                pos_logit = Some(logit);
            }
        }
        let denom = denom.expect("batch has other entries");
        let term = denom.ln()?.add_const(inv_t)?.sub(&pos_logit.expect("positive present"))?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty batch").mul_const(1.0 / (2 * n) as f64)?)
}
