//! A small stride-2 CNN producing a feature vector in (0, 1)^k and exposing
//! its last convolutional activations.
//!
//! Layout: `L` conv layers (3×3, stride 2, padding 1, ReLU), per-channel
//! global average pooling, a linear head and a sigmoid.
//!
//! # Checkpoint format
//!
//! All integers are little-endian `u32`, all parameters little-endian `f64`.
//!
//! ```text
//! b"DIDA1"
//! input_channels, input_size, layer_count, width[0..layer_count], feature_dim,
//! seed_lo, seed_hi
//! for each conv layer: kernel (width × in × 3 × 3), bias (width)
//! head weight (feature_dim × last_width), head bias (feature_dim)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Tensor};

const MAGIC: &[u8; 5] = b"DIDA1";
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub conv_widths: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            conv_widths: vec![8, 16, 32, 32],
            feature_dim: 32,
            seed: 0,
        }
    }
}

fn conv_out(size: usize) -> usize {
    (size + 2 * PADDING - KERNEL) / STRIDE + 1
}

impl EncoderConfig {
    /// Spatial side `p = q` of the last activation maps.
    pub fn activation_size(&self) -> usize {
        self.conv_widths.iter().fold(self.input_size, |s, _| conv_out(s))
    }

    /// Number `n` of last-layer activation maps.
    pub fn activation_channels(&self) -> usize {
        self.conv_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_channels == 0 || self.input_size == 0 {
            return bad("input channels and size must be positive".into());
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return bad(format!("conv widths must be nonempty and positive, got {:?}", self.conv_widths));
        }
        if self.feature_dim < 8 {
            return bad(format!("feature_dim must be at least 8, got {}", self.feature_dim));
        }
        let p = self.activation_size();
        if p < 2 {
            return bad(format!(
                "input {} shrinks to {}×{} after {} stride-2 layers; need at least 2×2",
                self.input_size,
                p,
                p,
                self.conv_widths.len()
            ));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = self.input_channels;
        for &w in &self.conv_widths {
            shapes.push(vec![w, c_in, KERNEL, KERNEL]);
            shapes.push(vec![w]);
            c_in = w;
        }
        shapes.push(vec![self.feature_dim, c_in]);
        shapes.push(vec![self.feature_dim]);
        shapes
    }
}

/// Last-conv-layer activations `A ∈ ℝ^{n×p×q}`, always graph-linked.
#[derive(Debug, Clone)]
pub struct ActivationStack(Tensor);

impl ActivationStack {
    /// Wraps an `n×p×q` tensor, making it a graph leaf if it is not linked.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Shape {
                what: "activation stack",
                expected: vec![0, 0, 0],
                actual: t.shape().to_vec(),
            });
        }
        Ok(Self(if t.requires_grad() { t } else { t.variable() }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub features: Tensor,
    pub activations: ActivationStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Tensor>,
}

impl Encoder {
    /// Kaiming-uniform initialization from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let (w_shape, b_shape) = (&pair[0], &pair[1]);
            let fan_in: usize = w_shape[1..].iter().product();
            let w_bound = (6.0 / fan_in as f64).sqrt();
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let w = (0..n).map(|_| rng.gen_range(-w_bound..w_bound)).collect();
            let b = (0..b_shape[0]).map(|_| rng.gen_range(-b_bound..b_bound)).collect();
            params.push(Tensor::new(w_shape, w)?);
            params.push(Tensor::new(b_shape, b)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if p.shape() != s.as_slice() {
                return Err(Error::Shape {
                    what: "encoder parameter",
                    expected: s.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        let params = params.iter().map(Tensor::detach).collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces the parameters; shapes must be unchanged.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        *self = Self::from_params(self.config.clone(), params)?;
        Ok(())
    }

    /// Fresh graph leaves for every parameter, for one differentiable pass.
    pub fn variables(&self) -> Vec<Tensor> {
        self.params.iter().map(Tensor::variable).collect()
    }

    /// Forward pass with the stored parameters. Gradients can be taken wrt
    /// the returned activations but not wrt the parameters.
    pub fn forward(&self, image: &Tensor) -> Result<EncoderOutput> {
        self.forward_with(&self.params, image)
    }

    /// Forward pass with caller-supplied parameters (typically from
    /// [`Encoder::variables`]).
    pub fn forward_with(&self, params: &[Tensor], image: &Tensor) -> Result<EncoderOutput> {
        let expected = [self.config.input_channels, self.config.input_size, self.config.input_size];
        if image.shape() != expected {
            return Err(Error::Shape {
                what: "encoder input",
                expected: expected.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        let layers = self.config.conv_widths.len();
        let mut x = image.clone();
        for l in 0..layers {
            x = conv2d(&x, &params[2 * l], &params[2 * l + 1], STRIDE, PADDING)?.relu()?;
        }
        // Keep A linked even when nothing upstream is, so attention maps can
        // always differentiate through the head.
        let activations = if x.requires_grad() { x } else { x.variable() };
        let features = self.head_with(params, &activations)?;
        Ok(EncoderOutput {
            features,
            activations: ActivationStack(activations),
        })
    }

    /// `f = σ(W · GAP(A) + b)` from last-layer activations.
    pub fn head_with(&self, params: &[Tensor], activations: &Tensor) -> Result<Tensor> {
        let l = self.config.conv_widths.len();
        let pooled = activations.channel_mean()?;
        Ok(params[2 * l].matvec(&pooled)?.add(&params[2 * l + 1])?.sigmoid()?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        let mut ints = vec![c.input_channels as u32, c.input_size as u32, c.conv_widths.len() as u32];
        ints.extend(c.conv_widths.iter().map(|&w| w as u32));
        ints.push(c.feature_dim as u32);
        ints.push(c.seed as u32);
        ints.push((c.seed >> 32) as u32);
        for i in ints {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err("bad magic".into());
        }
        let input_channels = cur.u32()? as usize;
        let input_size = cur.u32()? as usize;
        let layers = cur.u32()? as usize;
        if layers > 64 {
            return Err(format!("implausible layer count {layers}"));
        }
        let conv_widths = (0..layers).map(|_| cur.u32().map(|w| w as usize)).collect::<std::result::Result<_, _>>()?;
        let feature_dim = cur.u32()? as usize;
        let seed = cur.u32()? as u64 | (cur.u32()? as u64) << 32;
        let config = EncoderConfig {
            input_channels,
            input_size,
            conv_widths,
            feature_dim,
            seed,
        };
        config.validate().map_err(|e| e.to_string())?;
        let mut params = Vec::new();
        for shape in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| cur.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err("non-finite parameter".into());
            }
            params.push(Tensor::new(&shape, data).map_err(|e| e.to_string())?);
        }
        if cur.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
        }
        Self::from_params(config, params).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            msg,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or("truncated checkpoint")?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
