//! Finite-difference audits of every gradient path: single operations,
//! encoder parameters, the activation-gradient map, the full double-backprop
//! training loss, the contrastive loss and Hessian-vector products.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    contrastive_loss, dida_forward, dida_forward_with, dominant_selection, mask_salient_region, vda_signal,
    attention_map, AttentionConfig, SignalMode, DEFAULT_TEMPERATURE,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::scene::{generate_scene, DataConfig, Scene};
use crate::tensor::ops::{conv2d_input_grad, conv2d_kernel_grad};
use crate::tensor::{backward, conv2d, finite_diff_gradient, max_relative_error, Tensor, TensorError};

/// Central-difference step used by every suite.
pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;
pub const ACTIVATION_MAP_TOLERANCE: f64 = 1e-5;
/// Random inputs per operation.
pub const OP_CASES: usize = 20;
/// Inputs closer than this to a kink (ReLU at zero, a max tie) are redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckSize {
    Tiny,
    Small,
}

impl std::str::FromStr for CheckSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tiny" => Ok(CheckSize::Tiny),
            "small" => Ok(CheckSize::Small),
            _ => Err(format!("unknown size {s:?} (expected tiny or small)")),
        }
    }
}

impl fmt::Display for CheckSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckSize::Tiny => "tiny",
            CheckSize::Small => "small",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Worst entrywise relative error.
    Relative,
    /// Worst entrywise absolute error.
    Absolute,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub metric: Metric,
    pub worst: f64,
    /// Name of the case that produced `worst`.
    pub worst_case: String,
    pub tolerance: f64,
    pub cases: usize,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let metric = match self.metric {
            Metric::Relative => "rel",
            Metric::Absolute => "abs",
        };
        write!(
            f,
            "{} {:<22} worst {metric} error {:.3e} (tol {:.1e}, {} cases, worst: {}, {:.2}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.cases,
            self.worst_case,
            self.elapsed.as_secs_f64()
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        write!(f, "{}", if self.passed() { "all suites passed" } else { "gradcheck FAILED" })
    }
}

/// Worst error seen so far and which case produced it.
struct Tracker {
    worst: f64,
    case: String,
    cases: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            worst: 0.0,
            case: "-".into(),
            cases: 0,
        }
    }

    fn record(&mut self, case: impl Into<String>, err: f64) {
        self.cases += 1;
        // NaN counts as the worst possible outcome.
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.case = case.into();
        }
    }

    fn finish(self, name: &'static str, metric: Metric, tolerance: f64, start: Instant) -> SuiteResult {
        SuiteResult {
            name,
            metric,
            worst: self.worst,
            worst_case: self.case,
            tolerance,
            cases: self.cases,
            elapsed: start.elapsed(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Domain {
    /// Uniform in [−2, 2], at least the kink margin away from zero.
    Signed,
    /// Uniform in [0.5, 2].
    Positive,
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Signed => loop {
                let v: f64 = rng.gen_range(-2.0..=2.0);
                if v.abs() > KINK_MARGIN {
                    break v;
                }
            },
            Domain::Positive => rng.gen_range(0.5..=2.0),
        })
        .collect();
    Tensor::new(shape, data).expect("generated shape")
}

fn has_clear_max(t: &Tensor) -> bool {
    let mut v = t.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.len() < 2 || v[0] - v[1] > KINK_MARGIN
}

fn no_value_near_zero(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.abs() > KINK_MARGIN)
}

type OpFn = fn(&[Tensor]) -> std::result::Result<Tensor, TensorError>;

struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Domain)>,
    apply: OpFn,
    /// Rejects inputs that put the output near a kink.
    admissible: fn(&[Tensor]) -> bool,
}

fn any(_: &[Tensor]) -> bool {
    true
}

fn op_cases(scale: usize) -> Vec<OpCase> {
    let m = 3 * scale;
    let n = 4 * scale;
    let side = 5 * scale;
    let s = Domain::Signed;
    let p = Domain::Positive;
    let v = |shape: &[usize], d| (shape.to_vec(), d);
    let conv_out = (side + 2 - 3) / 2 + 1;
    let mut cases = vec![
        OpCase { name: "add", inputs: vec![v(&[m, n], s), v(&[m, n], s)], apply: |x| x[0].add(&x[1]), admissible: any },
        OpCase { name: "sub", inputs: vec![v(&[m, n], s), v(&[m, n], s)], apply: |x| x[0].sub(&x[1]), admissible: any },
        OpCase { name: "mul", inputs: vec![v(&[m, n], s), v(&[m, n], s)], apply: |x| x[0].mul(&x[1]), admissible: any },
        OpCase { name: "scale", inputs: vec![v(&[m, n], s), v(&[], s)], apply: |x| x[0].scale(&x[1]), admissible: any },
        OpCase { name: "mul_const", inputs: vec![v(&[m, n], s)], apply: |x| x[0].mul_const(1.7), admissible: any },
        OpCase { name: "add_const", inputs: vec![v(&[m, n], s)], apply: |x| x[0].add_const(-0.3), admissible: any },
        OpCase { name: "neg", inputs: vec![v(&[m, n], s)], apply: |x| x[0].neg(), admissible: any },
        OpCase { name: "relu", inputs: vec![v(&[m, n], s)], apply: |x| x[0].relu(), admissible: any },
        OpCase { name: "sigmoid", inputs: vec![v(&[m, n], s)], apply: |x| x[0].sigmoid(), admissible: any },
        OpCase { name: "exp", inputs: vec![v(&[m, n], s)], apply: |x| x[0].exp(), admissible: any },
        OpCase { name: "ln", inputs: vec![v(&[m, n], p)], apply: |x| x[0].ln(), admissible: any },
        OpCase { name: "powf", inputs: vec![v(&[m, n], p)], apply: |x| x[0].powf(1.5), admissible: any },
        OpCase { name: "powf_reciprocal", inputs: vec![v(&[m, n], p)], apply: |x| x[0].powf(-1.0), admissible: any },
        OpCase { name: "sum", inputs: vec![v(&[m, n], s)], apply: |x| x[0].sum(), admissible: any },
        OpCase { name: "gap", inputs: vec![v(&[m, n], s)], apply: |x| x[0].gap(), admissible: any },
        OpCase { name: "expand", inputs: vec![v(&[], s)], apply: |x| x[0].expand(&[3, 4]), admissible: any },
        OpCase { name: "dot", inputs: vec![v(&[n], s), v(&[n], s)], apply: |x| x[0].dot(&x[1]), admissible: any },
        OpCase { name: "l2_norm", inputs: vec![v(&[n], s)], apply: |x| x[0].l2_norm(), admissible: any },
        OpCase { name: "reshape", inputs: vec![v(&[m, n], s)], apply: |x| x[0].reshape(&[x[0].len()]), admissible: any },
        OpCase { name: "max_all", inputs: vec![v(&[m, n], s)], apply: |x| x[0].max_all(), admissible: |x| has_clear_max(&x[0]) },
        OpCase { name: "channel_sum", inputs: vec![v(&[2, m, m], s)], apply: |x| x[0].channel_sum(), admissible: any },
        OpCase { name: "channel_mean", inputs: vec![v(&[2, m, m], s)], apply: |x| x[0].channel_mean(), admissible: any },
        OpCase { name: "channel_expand", inputs: vec![v(&[n], s)], apply: |x| x[0].channel_expand(2, 3), admissible: any },
        OpCase { name: "matvec", inputs: vec![v(&[m, n], s), v(&[n], s)], apply: |x| x[0].matvec(&x[1]), admissible: any },
        OpCase { name: "mattvec", inputs: vec![v(&[m, n], s), v(&[m], s)], apply: |x| x[0].mattvec(&x[1]), admissible: any },
        OpCase { name: "outer", inputs: vec![v(&[m], s), v(&[n], s)], apply: |x| x[0].outer(&x[1]), admissible: any },
        OpCase {
            name: "conv2d_stride2",
            inputs: vec![v(&[2, side, side], s), v(&[3, 2, 3, 3], s), v(&[3], s)],
            apply: |x| conv2d(&x[0], &x[1], &x[2], 2, 1),
            admissible: any,
        },
        OpCase {
            name: "conv2d_stride1",
            inputs: vec![v(&[2, side, side], s), v(&[3, 2, 3, 3], s), v(&[3], s)],
            apply: |x| conv2d(&x[0], &x[1], &x[2], 1, 0),
            admissible: any,
        },
        OpCase {
            name: "conv2d_relu_sum",
            inputs: vec![v(&[1, 4, 4], s), v(&[2, 1, 3, 3], s), v(&[2], s)],
            apply: |x| conv2d(&x[0], &x[1], &x[2], 1, 1)?.relu()?.sum(),
            admissible: |x| conv2d(&x[0], &x[1], &x[2], 1, 1).map(|y| no_value_near_zero(&y)).unwrap_or(false),
        },
    ];
    // Gradient operations with their geometry fixed by the input sizes above.
    if side == 5 {
        cases.push(OpCase {
            name: "conv2d_input_grad",
            inputs: vec![v(&[3, 3, 3], s), v(&[3, 2, 3, 3], s)],
            apply: |x| conv2d_input_grad(&x[0], &x[1], 5, 5, 2, 1),
            admissible: any,
        });
        cases.push(OpCase {
            name: "conv2d_kernel_grad",
            inputs: vec![v(&[2, 5, 5], s), v(&[3, 3, 3], s)],
            apply: |x| conv2d_kernel_grad(&x[0], &x[1], 3, 3, 2, 1),
            admissible: any,
        });
    } else {
        debug_assert_eq!(conv_out, 5);
        cases.push(OpCase {
            name: "conv2d_input_grad",
            inputs: vec![v(&[3, 5, 5], s), v(&[3, 2, 3, 3], s)],
            apply: |x| conv2d_input_grad(&x[0], &x[1], 10, 10, 2, 1),
            admissible: any,
        });
        cases.push(OpCase {
            name: "conv2d_kernel_grad",
            inputs: vec![v(&[2, 10, 10], s), v(&[3, 5, 5], s)],
            apply: |x| conv2d_kernel_grad(&x[0], &x[1], 3, 3, 2, 1),
            admissible: any,
        });
    }
    cases
}

/// `Σ w ⊙ op(x)`: a scalar with a generic, nonzero upstream gradient.
fn contracted(apply: OpFn, inputs: &[Tensor], weights: &Tensor) -> std::result::Result<Tensor, TensorError> {
    let out = apply(inputs)?;
    out.reshape(&[out.len()])?.dot(weights)
}

fn draw_admissible(rng: &mut ChaCha8Rng, case: &OpCase) -> Vec<Tensor> {
    loop {
        let inputs: Vec<Tensor> = case.inputs.iter().map(|(shape, d)| draw(rng, shape, *d)).collect();
        if (case.admissible)(&inputs) {
            return inputs;
        }
    }
}

fn fd_wrt(
    inputs: &[Tensor],
    which: usize,
    mut f: impl FnMut(&[Tensor]) -> std::result::Result<f64, TensorError>,
) -> std::result::Result<Tensor, TensorError> {
    finite_diff_gradient(
        |probe: &Tensor| {
            let mut args = inputs.to_vec();
            args[which] = probe.clone();
            f(&args)
        },
        &inputs[which],
        FD_STEP,
    )
}

fn as_variables(inputs: &[Tensor]) -> Vec<Tensor> {
    inputs.iter().map(Tensor::variable).collect()
}

/// First-order gradients of every operation against central differences.
pub fn op_suite(size: CheckSize, tolerance: f64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e_55ed);
    let mut tracker = Tracker::new();
    for case in op_cases(scale_of(size)) {
        for trial in 0..OP_CASES {
            let inputs = draw_admissible(&mut rng, &case);
            let out_len = (case.apply)(&inputs)?.len();
            let weights = draw(&mut rng, &[out_len], Domain::Signed);
            let vars = as_variables(&inputs);
            let loss = contracted(case.apply, &vars, &weights)?;
            let grads = backward(&loss, &vars, false)?;
            for (i, g) in grads.iter().enumerate() {
                let fd = fd_wrt(&inputs, i, |x| Ok(contracted(case.apply, x, &weights)?.item()))?;
                tracker.record(format!("{} #{trial} arg {i}", case.name), max_relative_error(g.data(), fd.data()));
            }
        }
    }
    Ok(tracker.finish("ops", Metric::Relative, tolerance, start))
}

/// Hessian-vector products of every operation: the derivative of
/// `⟨∇L, v⟩` through the graph-linked gradient against central differences
/// of the plain gradient.
pub fn hessian_vector_suite(size: CheckSize, tolerance: f64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4e55);
    let mut tracker = Tracker::new();
    let trials = 4;
    for case in op_cases(scale_of(size)) {
        for trial in 0..trials {
            let inputs = draw_admissible(&mut rng, &case);
            let out_len = (case.apply)(&inputs)?.len();
            let weights = draw(&mut rng, &[out_len], Domain::Signed);
            let directions: Vec<Tensor> = inputs.iter().map(|x| draw(&mut rng, x.shape(), Domain::Signed)).collect();
            let contract = |x: &[Tensor], higher: bool| -> std::result::Result<(Tensor, Vec<Tensor>), TensorError> {
                let vars = as_variables(x);
                let loss = contracted(case.apply, &vars, &weights)?;
                let grads = backward(&loss, &vars, higher)?;
                let mut total = Tensor::scalar(0.0);
                for (g, d) in grads.iter().zip(&directions) {
                    total = total.add(&g.dot(d)?)?;
                }
                Ok((total, vars))
            };
            let (gv, vars) = contract(&inputs, true)?;
            let hv = backward(&gv, &vars, false)?;
            for (i, h) in hv.iter().enumerate() {
                let fd = fd_wrt(&inputs, i, |x| Ok(contract(x, false)?.0.item()))?;
                tracker.record(format!("{} #{trial} arg {i}", case.name), max_relative_error(h.data(), fd.data()));
            }
        }
    }
    Ok(tracker.finish("hessian_vector", Metric::Relative, tolerance, start))
}

fn scale_of(size: CheckSize) -> usize {
    match size {
        CheckSize::Tiny => 1,
        CheckSize::Small => 2,
    }
}

fn encoder_configs(size: CheckSize) -> Vec<EncoderConfig> {
    let base = EncoderConfig {
        input_channels: 3,
        input_size: 8,
        conv_widths: vec![4, 8],
        feature_dim: 8,
        seed: 11,
    };
    let mut configs = vec![
        base.clone(),
        EncoderConfig {
            conv_widths: vec![6],
            seed: 12,
            ..base.clone()
        },
        EncoderConfig {
            input_size: 16,
            conv_widths: vec![3, 5],
            seed: 13,
            ..base.clone()
        },
    ];
    if size == CheckSize::Small {
        configs.push(EncoderConfig {
            input_size: 16,
            conv_widths: vec![4, 6, 8],
            feature_dim: 10,
            seed: 14,
            ..base
        });
    }
    configs
}

fn tiny_scene(side: usize, index: u64) -> Result<Scene> {
    let max_size = (side as f64 - 2.0).min(side as f64 / 2.0 + 1.0);
    generate_scene(
        &DataConfig {
            image_size: side,
            min_objects: 1,
            max_objects: 1,
            min_size: (max_size - 2.0).max(2.0),
            max_size,
            seed: 0x5ce,
            ..DataConfig::default()
        },
        index,
    )
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Tensor {
    let shape = [cfg.input_channels, cfg.input_size, cfg.input_size];
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("image shape")
}

fn fd_params(
    params: &[Tensor],
    which: usize,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Tensor> {
    finite_diff_gradient(
        |probe: &Tensor| {
            let mut args = params.to_vec();
            args[which] = probe.clone();
            f(&args)
        },
        &params[which],
        FD_STEP,
    )
}

/// Gradients of a random linear readout of the features wrt every encoder
/// parameter.
pub fn encoder_suite(size: CheckSize, tolerance: f64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xe1c0de);
    let mut tracker = Tracker::new();
    for cfg in encoder_configs(size) {
        let encoder = Encoder::new(cfg.clone())?;
        let image = random_image(&mut rng, &cfg);
        let weights = draw(&mut rng, &[cfg.feature_dim], Domain::Signed);
        let readout = |params: &[Tensor]| -> Result<Tensor> {
            Ok(encoder.forward_with(params, &image)?.features.dot(&weights)?)
        };
        let vars = encoder.variables();
        let grads = backward(&readout(&vars)?, &vars, false)?;
        for (i, g) in grads.iter().enumerate() {
            let fd = fd_params(encoder.params(), i, |p| Ok(readout(p)?.item()))?;
            tracker.record(
                format!("widths {:?} param {i}", cfg.conv_widths),
                max_relative_error(g.data(), fd.data()),
            );
        }
    }
    Ok(tracker.finish("encoder", Metric::Relative, tolerance, start))
}

/// The attention map against an oracle that obtains each activation
/// gradient by finite differences of the signal through the encoder head.
pub fn activation_map_suite(size: CheckSize, tolerance: f64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut tracker = Tracker::new();
    let scenes_per_config = if size == CheckSize::Tiny { 3 } else { 6 };
    for cfg in encoder_configs(size) {
        let encoder = Encoder::new(cfg.clone())?;
        for index in 0..scenes_per_config {
            let scene = tiny_scene(cfg.input_size, index)?;
            for mode in [SignalMode::Dot, SignalMode::threshold()] {
                let (masked, _) = mask_salient_region(&scene.image, &scene.saliency)?;
                let original = encoder.forward(&scene.image)?;
                let f_masked = encoder.forward(&masked)?.features;
                let signal = vda_signal(&original.features, &f_masked, mode)?;
                let map = attention_map(&signal, &original.activations, false)?;

                let oracle = oracle_map(&encoder, original.activations.tensor(), &f_masked, mode)?;
                let err = map
                    .data()
                    .iter()
                    .zip(&oracle)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                tracker.record(format!("widths {:?} scene {index} {mode:?}", cfg.conv_widths), err);
            }
        }
    }
    Ok(tracker.finish("activation_map", Metric::Absolute, tolerance, start))
}

/// `M = ReLU(Σ_i mean(G_i) A_i) / max` with `G` from central differences of
/// the signal wrt each activation entry. The threshold selection is frozen at
/// the unperturbed point, matching its treatment as a constant mask.
fn oracle_map(encoder: &Encoder, activations: &Tensor, f_masked: &Tensor, mode: SignalMode) -> Result<Vec<f64>> {
    let plain = activations.detach();
    let f0 = encoder.head_with(encoder.params(), &plain)?;
    let fm = f_masked.to_vec();
    let selection = match mode {
        SignalMode::Threshold { keep_fraction } => {
            let d: Vec<f64> = f0.data().iter().zip(&fm).map(|(a, b)| a - b).collect();
            Some(dominant_selection(&Tensor::from_slice(&d), keep_fraction))
        }
        SignalMode::Dot => None,
    };
    let signal = |a: &Tensor| -> Result<f64> {
        let f = encoder.head_with(encoder.params(), a)?;
        let d = f.data().iter().zip(&fm).map(|(x, y)| x - y);
        Ok(match &selection {
            Some(sel) => d.zip(sel).map(|(v, s)| v * s).sum(),
            None => d.zip(f.data()).map(|(v, x)| v * x).sum(),
        })
    };
    let g = finite_diff_gradient(signal, &plain, FD_STEP)?;
    let (n, p, q) = (plain.shape()[0], plain.shape()[1], plain.shape()[2]);
    let plane = p * q;
    let weights: Vec<f64> = g.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
    let mut map = vec![0.0; plane];
    for c in 0..n {
        for (m, a) in map.iter_mut().zip(&plain.data()[c * plane..(c + 1) * plane]) {
            *m += weights[c] * a;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for m in &mut map {
            *m /= max;
        }
    }
    Ok(map)
}

/// Gradient of the full training loss (two forwards, the activation-gradient
/// map with retained graph, softening, cosine loss) wrt every parameter of a
/// two-layer encoder on 8×8 scenes.
pub fn dida_forward_suite(size: CheckSize, tolerance: f64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut tracker = Tracker::new();
    let seeds: &[u64] = if size == CheckSize::Tiny { &[21, 22] } else { &[21, 22, 23, 24] };
    for &seed in seeds {
        let cfg = EncoderConfig {
            input_channels: 3,
            input_size: 8,
            conv_widths: vec![4, 8],
            feature_dim: 8,
            seed,
        };
        let encoder = Encoder::new(cfg)?;
        for index in 0..2 {
            let scene = tiny_scene(8, seed * 10 + index)?;
            let (out, vars) = dida_forward(&encoder, &scene)?;
            let grads = backward(&out.loss, &vars, false)?;
            for (i, g) in grads.iter().enumerate() {
                let fd = fd_params(encoder.params(), i, |p| {
                    Ok(dida_forward_with(&encoder, p, &scene, AttentionConfig::default())?.loss.item())
                })?;
                tracker.record(
                    format!("seed {seed} scene {index} param {i}"),
                    max_relative_error(g.data(), fd.data()),
                );
            }
        }
    }
    Ok(tracker.finish("dida_forward", Metric::Relative, tolerance, start))
}

/// Gradient of the contrastive loss wrt every feature vector in the batch.
pub fn contrastive_suite(size: CheckSize, tolerance: f64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0a7);
    let mut tracker = Tracker::new();
    let (batch, k) = if size == CheckSize::Tiny { (4, 8) } else { (8, 16) };
    for trial in 0..OP_CASES {
        let draw_features =
            |rng: &mut ChaCha8Rng| -> Vec<Tensor> { (0..batch).map(|_| draw(rng, &[k], Domain::Positive)).collect() };
        let a = draw_features(&mut rng);
        let b = draw_features(&mut rng);
        let all: Vec<Tensor> = a.iter().chain(&b).cloned().collect();
        let loss_of = |x: &[Tensor]| contrastive_loss(&x[..batch], &x[batch..], DEFAULT_TEMPERATURE);
        let vars = as_variables(&all);
        let grads = backward(&loss_of(&vars)?, &vars, false)?;
        for (i, g) in grads.iter().enumerate() {
            let fd = fd_params(&all, i, |x| Ok(loss_of(x)?.item()))?;
            tracker.record(format!("#{trial} vector {i}"), max_relative_error(g.data(), fd.data()));
        }
    }
    Ok(tracker.finish("contrastive", Metric::Relative, tolerance, start))
}

/// First-order gradients with and without retained graph links must agree
/// bit for bit.
pub fn retained_graph_suite(size: CheckSize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut tracker = Tracker::new();
    for cfg in encoder_configs(size) {
        let encoder = Encoder::new(cfg.clone())?;
        let scene = tiny_scene(cfg.input_size, 0)?;
        let (out, vars) = dida_forward(&encoder, &scene)?;
        let plain = backward(&out.loss, &vars, false)?;
        let linked = backward(&out.loss, &vars, true)?;
        let err = plain
            .iter()
            .zip(&linked)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        tracker.record(format!("widths {:?}", cfg.conv_widths), err);
    }
    Ok(tracker.finish("retained_graph", Metric::Absolute, 0.0, start))
}

/// Hessian-vector product of the full training loss: the gradient of
/// `⟨∇L, v⟩` against central differences of `⟨∇L, v⟩`.
pub fn pipeline_hessian_suite(tolerance: f64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4e552);
    let mut tracker = Tracker::new();
    let encoder = Encoder::new(EncoderConfig {
        input_channels: 3,
        input_size: 8,
        conv_widths: vec![4, 8],
        feature_dim: 8,
        seed: 31,
    })?;
    let image = random_image(&mut rng, encoder.config());
    let weights = draw(&mut rng, &[8], Domain::Signed);
    let directions: Vec<Tensor> = encoder.params().iter().map(|p| draw(&mut rng, p.shape(), Domain::Signed)).collect();
    let contract = |params: &[Tensor], higher: bool| -> Result<(Tensor, Vec<Tensor>)> {
        let vars = as_variables(params);
        let loss = encoder.forward_with(&vars, &image)?.features.dot(&weights)?;
        let grads = backward(&loss, &vars, higher)?;
        let mut total = Tensor::scalar(0.0);
        for (g, d) in grads.iter().zip(&directions) {
            total = total.add(&g.dot(d)?)?;
        }
        Ok((total, vars))
    };
    let (gv, vars) = contract(encoder.params(), true)?;
    let hv = backward(&gv, &vars, false)?;
    for (i, h) in hv.iter().enumerate() {
        let fd = fd_params(encoder.params(), i, |p| Ok(contract(p, false)?.0.item()))?;
        tracker.record(format!("param {i}"), max_relative_error(h.data(), fd.data()));
    }
    Ok(tracker.finish("encoder_hessian_vector", Metric::Relative, tolerance, start))
}

/// Runs every suite. `tolerance` overrides the default tolerance of each
/// finite-difference suite.
pub fn run_all(size: CheckSize, tolerance: Option<f64>) -> Result<GradcheckReport> {
    let tol = |default: f64| tolerance.unwrap_or(default);
    let suites = vec![
        op_suite(size, tol(OP_TOLERANCE))?,
        hessian_vector_suite(size, tol(PIPELINE_TOLERANCE))?,
        encoder_suite(size, tol(OP_TOLERANCE))?,
        pipeline_hessian_suite(tol(PIPELINE_TOLERANCE))?,
        activation_map_suite(size, tol(ACTIVATION_MAP_TOLERANCE))?,
        dida_forward_suite(size, tol(PIPELINE_TOLERANCE))?,
        contrastive_suite(size, tol(OP_TOLERANCE))?,
        retained_graph_suite(size)?,
    ];
    Ok(GradcheckReport { suites })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::DEFAULT_KEEP_FRACTION;

    #[test]
    fn keep_fraction_default_is_used_by_threshold_mode() {
        assert_eq!(
            SignalMode::threshold(),
            SignalMode::Threshold {
                keep_fraction: DEFAULT_KEEP_FRACTION
            }
        );
    }

    #[test]
    fn tracker_treats_nan_as_failure() {
        let mut t = Tracker::new();
        t.record("a", 1e-9);
        t.record("b", f64::NAN);
        let r = t.finish("x", Metric::Relative, 1.0, Instant::now());
        assert!(!r.passed());
        assert_eq!(r.worst_case, "b");
    }

    #[test]
    fn clear_max_detection() {
        assert!(has_clear_max(&Tensor::from_slice(&[0.0, 1.0, 0.5])));
        assert!(!has_clear_max(&Tensor::from_slice(&[1.0, 1.0 + 1e-6])));
    }
}
