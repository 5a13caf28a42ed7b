//! Optimizers and the training loop combining the difference-attention loss
//! with an in-batch contrastive loss.

mod eval;

use std::fmt;
use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    contrastive_loss, dida_forward, dida_forward_with, AttentionConfig, SignalMode, DEFAULT_TEMPERATURE,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::scene::{augment, Scene};
use crate::tensor::{backward, Tensor, TensorError};

pub use eval::{
    attend, binarize, grabcut_seeds, iou, mean_iou, scene_ious, vda_diagnostic, MapSource, MaskOracle, Seed, Trimap,
    VdaMaps, BINARIZE_THRESHOLD, SEED_BACKGROUND, SEED_FOREGROUND,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Plain SGD or Adam (β1 = 0.9, β2 = 0.999, ε = 1e−8) over flat buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update; returns the new parameter tensors.
    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Vec<Tensor> {
        self.step += 1;
        let bias1 = 1.0 - Self::BETA1.powi(self.step);
        let bias2 = 1.0 - Self::BETA2.powi(self.step);
        params
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (p, g))| {
                let data = match self.kind {
                    OptimizerKind::Sgd => p.data().iter().zip(g.data()).map(|(w, d)| w - self.lr * d).collect(),
                    OptimizerKind::Adam => {
                        let (m, v) = (&mut self.first[i], &mut self.second[i]);
                        p.data()
                            .iter()
                            .zip(g.data())
                            .enumerate()
                            .map(|(j, (w, d))| {
                                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * d;
                                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * d * d;
                                let m_hat = m[j] / bias1;
                                let v_hat = v[j] / bias2;
                                w - self.lr * m_hat / (v_hat.sqrt() + Self::EPS)
                            })
                            .collect()
                    }
                };
                Tensor::new(p.shape(), data).expect("parameter shape")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda_dida: f64,
    pub lambda_contrastive: f64,
    pub eval_interval: usize,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub temperature: f64,
    /// Signal behind the softened map scored by the held-out IoU.
    pub eval_mode: SignalMode,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda_dida: 1.0,
            lambda_contrastive: 1.0,
            eval_interval: 100,
            seed: 0,
            checkpoint_path: None,
            temperature: DEFAULT_TEMPERATURE,
            eval_mode: SignalMode::Dot,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch size and eval interval must be positive".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda_dida >= 0.0 && self.lambda_contrastive >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub dida_loss: f64,
    pub contrastive_loss: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "step,dida_loss,contrastive_loss,mean_iou";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.dida_loss, r.contrastive_loss, r.mean_iou));
        }
        out
    }

    pub fn first(&self) -> Option<&TrainRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

/// State captured when a loss or gradient goes non-finite.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub step: usize,
    pub reason: String,
    pub dida_loss: f64,
    pub contrastive_loss: f64,
    pub param_norms: Vec<f64>,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "step={}", self.step)?;
        writeln!(f, "reason={}", self.reason)?;
        writeln!(f, "dida_loss={}", self.dida_loss)?;
        writeln!(f, "contrastive_loss={}", self.contrastive_loss)?;
        for (i, n) in self.param_norms.iter().enumerate() {
            writeln!(f, "param[{i}].l2={n}")?;
        }
        Ok(())
    }
}

/// Training scenes and held-out scenes: the held-out split is the last
/// fifth of the dataset (the whole dataset when that would be empty).
pub fn split_dataset(dataset: &[Scene]) -> (&[Scene], &[Scene]) {
    let held = dataset.len() / 5;
    if held == 0 {
        (dataset, dataset)
    } else {
        dataset.split_at(dataset.len() - held)
    }
}

/// Mean DiDA loss, mean contrastive loss and mean IoU of the softened map
/// under `config.eval_mode` of `encoder` on `scenes`. Augmentations are fixed so
/// records are comparable.
pub fn evaluate(encoder: &Encoder, scenes: &[Scene], config: &TrainConfig, step: usize) -> Result<TrainRecord> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses = config.execution.try_map(scenes, |scene| -> Result<f64> {
        Ok(dida_forward_with(encoder, encoder.params(), scene, AttentionConfig::default())?.loss.item())
    })?;
    let dida_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let maps = VdaMaps {
        encoder,
        mode: config.eval_mode,
    };
    let mean_iou = mean_iou(&maps, scenes, config.execution)?;

    let contrastive = if scenes.len() >= 2 {
        let indexed: Vec<(usize, &Scene)> = scenes.iter().enumerate().collect();
        let views = config.execution.try_map(&indexed, |&(i, scene)| -> Result<(Tensor, Tensor)> {
            let a = encoder.forward(&augment(scene, 2 * i as u64).image)?.features.detach();
            let b = encoder.forward(&augment(scene, 2 * i as u64 + 1).image)?.features.detach();
            Ok((a, b))
        })?;
        let (va, vb): (Vec<Tensor>, Vec<Tensor>) = views.into_iter().unzip();
        contrastive_loss(&va, &vb, config.temperature)?.item()
    } else {
        0.0
    };
    Ok(TrainRecord {
        step,
        dida_loss,
        contrastive_loss: contrastive,
        mean_iou,
    })
}

struct StepOutcome {
    grads: Vec<Tensor>,
    dida_loss: Option<f64>,
    contrastive_loss: Option<f64>,
}

fn accumulate(total: &mut [Vec<f64>], grads: &[Tensor], weight: f64) {
    for (acc, g) in total.iter_mut().zip(grads) {
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += weight * v;
        }
    }
}

fn batch_gradient(
    encoder: &Encoder,
    batch: &[&Scene],
    view_seeds: &[(u64, u64)],
    config: &TrainConfig,
) -> Result<StepOutcome> {
    let exec = config.execution;
    let (dida, contrastive) = exec.join(
        || -> Result<Option<(f64, Vec<Vec<Tensor>>)>> {
            if config.lambda_dida == 0.0 {
                return Ok(None);
            }
            let per_scene = exec.try_map(batch, |scene| -> Result<(f64, Vec<Tensor>)> {
                let (out, vars) = dida_forward(encoder, scene)?;
                let grads = backward(&out.loss, &vars, false)?;
                Ok((out.loss.item(), grads))
            })?;
            let loss = per_scene.iter().map(|p| p.0).sum::<f64>() / per_scene.len() as f64;
            Ok(Some((loss, per_scene.into_iter().map(|p| p.1).collect())))
        },
        || -> Result<Option<(f64, Vec<Tensor>)>> {
            if config.lambda_contrastive == 0.0 || batch.len() < 2 {
                return Ok(None);
            }
            let vars = encoder.variables();
            let mut va = Vec::with_capacity(batch.len());
            let mut vb = Vec::with_capacity(batch.len());
            for (scene, &(sa, sb)) in batch.iter().zip(view_seeds) {
                va.push(encoder.forward_with(&vars, &augment(scene, sa).image)?.features);
                vb.push(encoder.forward_with(&vars, &augment(scene, sb).image)?.features);
            }
            let loss = contrastive_loss(&va, &vb, config.temperature)?;
            let grads = backward(&loss, &vars, false)?;
            Ok(Some((loss.item(), grads)))
        },
    );
    let (dida, contrastive) = (dida?, contrastive?);
    let mut total: Vec<Vec<f64>> = encoder.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut dida_loss = None;
    let mut contrastive_loss = None;
    if let Some((loss, per_scene)) = dida {
        let weight = config.lambda_dida / per_scene.len() as f64;
        for g in &per_scene {
            accumulate(&mut total, g, weight);
        }
        dida_loss = Some(loss);
    }
    if let Some((loss, grads)) = contrastive {
        accumulate(&mut total, &grads, config.lambda_contrastive);
        contrastive_loss = Some(loss);
    }
    let grads = encoder
        .params()
        .iter()
        .zip(total)
        .map(|(p, g)| Tensor::new(p.shape(), g).expect("gradient shape"))
        .collect();
    Ok(StepOutcome {
        grads,
        dida_loss,
        contrastive_loss,
    })
}

fn divergence(encoder: &Encoder, step: usize, reason: String, dida: f64, con: f64, config: &TrainConfig) -> Error {
    let report = DivergenceReport {
        step,
        reason,
        dida_loss: dida,
        contrastive_loss: con,
        param_norms: encoder
            .params()
            .iter()
            .map(|p| p.data().iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    };
    if let Some(path) = &config.checkpoint_path {
        let mut dump = path.clone().into_os_string();
        dump.push(".diverged.txt");
        // Best effort: the error itself carries the same state.
        let _ = fs::write(dump, report.to_string());
    }
    Error::Diverged(Box::new(report))
}

/// Trains `encoder` on the training split of `dataset`, evaluating on the
/// held-out split at step 0, every `eval_interval` steps and after the last
/// step. Deterministic given `config.seed`.
pub fn train(mut encoder: Encoder, dataset: &[Scene], config: &TrainConfig) -> Result<(Encoder, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train_set, held_out) = split_dataset(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, encoder.params());
    let mut report = TrainReport::default();

    let checkpoint = |enc: &Encoder| -> Result<()> {
        match &config.checkpoint_path {
            Some(path) => enc.save(path),
            None => Ok(()),
        }
    };

    report.records.push(evaluate(&encoder, held_out, config, 0)?);
    for step in 1..=config.steps {
        let batch_len = config.batch_size.min(train_set.len());
        let picks = rand::seq::index::sample(&mut rng, train_set.len(), batch_len);
        let batch: Vec<&Scene> = picks.iter().map(|i| &train_set[i]).collect();
        let view_seeds: Vec<(u64, u64)> = (0..batch_len).map(|_| (rng.gen(), rng.gen())).collect();

        let outcome = match batch_gradient(&encoder, &batch, &view_seeds, config) {
            Ok(o) => o,
            Err(Error::Tensor(TensorError::NonFinite { op })) => {
                return Err(divergence(
                    &encoder,
                    step,
                    format!("non-finite value in {op}"),
                    f64::NAN,
                    f64::NAN,
                    config,
                ))
            }
            Err(e) => return Err(e),
        };
        let losses_finite = [outcome.dida_loss, outcome.contrastive_loss]
            .iter()
            .flatten()
            .all(|l| l.is_finite());
        let grads_finite = outcome.grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
        if !losses_finite || !grads_finite {
            return Err(divergence(
                &encoder,
                step,
                "non-finite loss or gradient".into(),
                outcome.dida_loss.unwrap_or(0.0),
                outcome.contrastive_loss.unwrap_or(0.0),
                config,
            ));
        }
        let updated = optimizer.step(encoder.params(), &outcome.grads);
        encoder.set_params(updated)?;

        if step % config.eval_interval == 0 || step == config.steps {
            report.records.push(evaluate(&encoder, held_out, config, step)?);
            checkpoint(&encoder)?;
        }
    }
    Ok((encoder, report))
}
