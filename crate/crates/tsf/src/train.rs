//! Two-stage training: pretrain the encoder/decoder on one-to-one tasks,
//! then freeze the encoder and finetune fusion, attention, and decoder on
//! random multi-input tasks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsf_core::adam::{Adam, AdamConfig};
use tsf_core::backbone::ParamBindings;
use tsf_core::fusion::{synthesize_on_graph, ModelParams, Trainability};
use tsf_core::graph::Graph;
use tsf_core::losses::{
    reconstruction_on_graph, single_branch_on_graph, FrozenFeatureNet, LossWeights,
};
use tsf_core::rng::{derive_seed, Rng};
use tsf_core::tensor::Tensor;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{sample_training_task, split_dataset, Dataset, MultiSequenceSample};
use crate::error::{io_err, Result, TsfError};

pub const DEFAULT_PRETRAIN_STEPS: u64 = 20_000;
pub const DEFAULT_FINETUNE_STEPS: u64 = 10_000;
pub const DEFAULT_PRETRAIN_LR: f64 = 2e-4;
pub const DEFAULT_FINETUNE_LR: f64 = 1e-4;
pub const DEFAULT_CHANNELS: usize = 32;
pub const DEFAULT_PERCEPTUAL_SEED: u64 = 0x7a9e_11;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.66, 0.08, 0.26);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub data: PathBuf,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub log_path: Option<PathBuf>,
    #[serde(default = "default_lambda_r")]
    pub lambda_r: f64,
    #[serde(default = "default_lambda_p")]
    pub lambda_p: f64,
    #[serde(default)]
    pub freeze_decoder: bool,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_perceptual_seed")]
    pub perceptual_seed: u64,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
}

fn default_batch() -> usize {
    1
}
fn default_lambda_r() -> f64 {
    10.0
}
fn default_lambda_p() -> f64 {
    0.01
}
fn default_channels() -> usize {
    DEFAULT_CHANNELS
}
fn default_perceptual_seed() -> u64 {
    DEFAULT_PERCEPTUAL_SEED
}
fn default_split() -> (f64, f64, f64) {
    DEFAULT_SPLIT
}

impl TrainConfig {
    pub fn new(stage: Stage, data: impl Into<PathBuf>) -> Self {
        TrainConfig {
            stage,
            data: data.into(),
            steps: None,
            lr: None,
            batch_size: 1,
            seed: 0,
            out_checkpoint: None,
            init_checkpoint: None,
            log_path: None,
            lambda_r: default_lambda_r(),
            lambda_p: default_lambda_p(),
            freeze_decoder: false,
            channels: DEFAULT_CHANNELS,
            perceptual_seed: DEFAULT_PERCEPTUAL_SEED,
            split: DEFAULT_SPLIT,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps.unwrap_or(match self.stage {
            Stage::Pretrain => DEFAULT_PRETRAIN_STEPS,
            Stage::Finetune => DEFAULT_FINETUNE_STEPS,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.stage {
            Stage::Pretrain => DEFAULT_PRETRAIN_LR,
            Stage::Finetune => DEFAULT_FINETUNE_LR,
        })
    }

    pub fn loss_weights(&self) -> LossWeights<f32> {
        LossWeights {
            lambda_r: self.lambda_r as f32,
            lambda_p: self.lambda_p as f32,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l1_plain: f64,
    pub p_plain: f64,
    pub l1_att: Option<f64>,
    pub p_att: Option<f64>,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub log: Vec<StepLog>,
}

struct LogSink {
    writer: Option<BufWriter<File>>,
}

impl LogSink {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let writer = match path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
            None => None,
        };
        Ok(LogSink { writer })
    }

    fn record(&mut self, entry: &StepLog) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            let line = serde_json::to_string(entry)?;
            writeln!(w, "{line}").map_err(|e| TsfError::Other(format!("log write: {e}")))?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()
                .map_err(|e| TsfError::Other(format!("log flush: {e}")))?;
        }
        Ok(())
    }
}

fn load_training_set(config: &TrainConfig, dataset: &Dataset) -> Result<Vec<MultiSequenceSample>> {
    let (train, _, _) = split_dataset(dataset.subjects(), config.split)?;
    if train.is_empty() {
        return Err(TsfError::InvalidSpec("training split is empty".into()));
    }
    train.iter().map(|id| dataset.load_sample(id)).collect()
}

/// Accumulates per-parameter gradients across a batch, keyed by name.
struct GradBatch {
    sums: BTreeMap<String, Tensor<f32>>,
}

impl GradBatch {
    fn new() -> Self {
        GradBatch {
            sums: BTreeMap::new(),
        }
    }

    fn add(&mut self, binds: &ParamBindings, grads: &tsf_core::graph::Gradients<f32>, scale: f32) {
        for (name, id) in binds.entries() {
            if let Some(grad) = grads.get(*id) {
                match self.sums.get_mut(name.as_str()) {
                    Some(acc) => acc.axpy(scale, grad),
                    None => {
                        let mut t = Tensor::zeros(grad.shape());
                        t.axpy(scale, grad);
                        self.sums.insert(name.clone(), t);
                    }
                }
            }
        }
    }

    fn apply(&self, adam: &mut Adam<f32>, model: &mut ModelParams<f32>) {
        adam.begin_step();
        model.visit_mut(&mut |name, tensor| {
            if let Some(grad) = self.sums.get(&name) {
                adam.update(&name, tensor, grad);
            }
        });
    }
}

fn check_finite(step: u64, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(TsfError::Divergence {
            step,
            what: format!("loss is {v}"),
        });
    }
    Ok(())
}

/// Pretrain the shared encoder and the conditional decoder on one-to-one
/// tasks: a random source sequence decodes to a random different target,
/// with the single-branch loss. Fusion and attention parameters are left
/// untouched.
pub fn pretrain(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    if config.stage != Stage::Pretrain {
        return Err(TsfError::InvalidSpec("config stage is not pretrain".into()));
    }
    let n = dataset.n_sequences();
    let samples = load_training_set(config, dataset)?;
    let mut model = ModelParams::<f32>::new(config.seed, n, config.channels);
    let frozen = FrozenFeatureNet::<f32>::new(config.perceptual_seed);
    let weights = config.loss_weights();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr()));
    let mut rng = Rng::new(derive_seed(config.seed, 1));
    let mut sink = LogSink::open(&config.log_path)?;
    let mut log = Vec::with_capacity(config.steps() as usize);

    for step in 1..=config.steps() {
        let mut batch = GradBatch::new();
        let mut l1_sum = 0.0;
        let mut p_sum = 0.0;
        let mut total_sum = 0.0;
        for _ in 0..config.batch_size {
            let sample = &samples[rng.below(samples.len())];
            let src = rng.below(n);
            let mut tgt = rng.below(n - 1);
            if tgt >= src {
                tgt += 1;
            }

            let mut g = Graph::new();
            let mut binds = ParamBindings::new();
            let enc = model.encoder.bind(&mut g, &mut binds, true);
            let dec = model.decoder.bind(&mut g, &mut binds, true);
            let image = g.constant(sample.images[src].clone());
            let feats = enc.forward(&mut g, image)?;
            let tgt_code: Vec<f32> = (0..n).map(|i| if i == tgt { 1.0 } else { 0.0 }).collect();
            let code = g.constant(Tensor::from_vec(&[n], tgt_code).map_err(tsf_core::Error::from)?);
            let gen = dec.generate(&mut g, code)?;
            let decoded = gen.forward(&mut g, feats)?;
            let net = frozen.bind(&mut g);
            let target = g.constant(sample.images[tgt].clone());
            let (total, l1, p) = single_branch_on_graph(&mut g, &net, decoded, target, weights)?;

            let grads = g.backward(total)?;
            batch.add(&binds, &grads, 1.0 / config.batch_size as f32);
            l1_sum += g.value(l1).as_scalar().map_err(tsf_core::Error::from)? as f64;
            p_sum += g.value(p).as_scalar().map_err(tsf_core::Error::from)? as f64;
            total_sum += g.value(total).as_scalar().map_err(tsf_core::Error::from)? as f64;
        }
        let b = config.batch_size as f64;
        let total = total_sum / b;
        check_finite(step, total)?;
        batch.apply(&mut adam, &mut model);

        let entry = StepLog {
            step,
            l1_plain: l1_sum / b,
            p_plain: p_sum / b,
            l1_att: None,
            p_att: None,
            total,
        };
        sink.record(&entry)?;
        log.push(entry);
    }
    sink.finish()?;

    if let Some(path) = &config.out_checkpoint {
        save_checkpoint(path, &model, config.seed)?;
    }
    Ok(TrainOutcome { model, log })
}

/// Finetune with the encoder frozen: each step draws a random task (inputs
/// and target), runs the full fusion pipeline, and applies the two-branch
/// loss to the fusion weights, the attention block, and (by default) the
/// decoder.
pub fn finetune(config: &TrainConfig, dataset: &Dataset, init: &Path) -> Result<TrainOutcome> {
    if config.stage != Stage::Finetune {
        return Err(TsfError::InvalidSpec("config stage is not finetune".into()));
    }
    let (mut model, manifest) = load_checkpoint(init)?;
    let n = dataset.n_sequences();
    if manifest.n != n {
        return Err(TsfError::ArchitectureMismatch(format!(
            "checkpoint built for {} sequences, dataset has {n}",
            manifest.n
        )));
    }
    let samples = load_training_set(config, dataset)?;
    let frozen = FrozenFeatureNet::<f32>::new(config.perceptual_seed);
    let weights = config.loss_weights();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr()));
    let mut rng = Rng::new(derive_seed(config.seed, 2));
    let mut sink = LogSink::open(&config.log_path)?;
    let mut log = Vec::with_capacity(config.steps() as usize);

    let trainability = Trainability {
        encoder: false,
        decoder: !config.freeze_decoder,
        fusion: true,
        attention: true,
    };

    for step in 1..=config.steps() {
        let mut batch = GradBatch::new();
        let mut sums = [0.0f64; 5];
        for _ in 0..config.batch_size {
            let sample = &samples[rng.below(samples.len())];
            let code = sample_training_task(sample, &mut rng)?;
            let images: Vec<Option<Tensor<f32>>> = (0..n)
                .map(|i| code.is_available(i).then(|| sample.images[i].clone()))
                .collect();

            let mut g = Graph::new();
            let mut binds = ParamBindings::new();
            let sg = synthesize_on_graph(&mut g, &mut binds, &model, &images, &code, trainability)?;
            let net = frozen.bind(&mut g);
            let target = g.constant(sample.images[code.target()].clone());
            let loss =
                reconstruction_on_graph(&mut g, &net, sg.x_plain, sg.x_attended, target, weights)?;

            let grads = g.backward(loss.total)?;
            batch.add(&binds, &grads, 1.0 / config.batch_size as f32);
            let grab = |id| -> Result<f64> {
                Ok(g.value(id).as_scalar().map_err(tsf_core::Error::from)? as f64)
            };
            sums[0] += grab(loss.l1_plain)?;
            sums[1] += grab(loss.p_plain)?;
            sums[2] += grab(loss.l1_att)?;
            sums[3] += grab(loss.p_att)?;
            sums[4] += grab(loss.total)?;
        }
        let b = config.batch_size as f64;
        check_finite(step, sums[4] / b)?;
        batch.apply(&mut adam, &mut model);

        let entry = StepLog {
            step,
            l1_plain: sums[0] / b,
            p_plain: sums[1] / b,
            l1_att: Some(sums[2] / b),
            p_att: Some(sums[3] / b),
            total: sums[4] / b,
        };
        sink.record(&entry)?;
        log.push(entry);
    }
    sink.finish()?;

    if let Some(path) = &config.out_checkpoint {
        save_checkpoint(path, &model, manifest.seed)?;
    }
    Ok(TrainOutcome { model, log })
}
