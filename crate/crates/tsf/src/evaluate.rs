//! Evaluation over the fixed per-subject tasks, grouped by input count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tsf_core::codec::TaskCode;
use tsf_core::fusion::{synthesize, ModelParams};
use tsf_core::losses::FrozenFeatureNet;
use tsf_core::metrics::{perceptual_distance, psnr, ssim};
use tsf_core::tensor::Tensor;

use crate::data::{fixed_eval_tasks, Dataset};
use crate::error::Result;

/// Images live in [-1, 1].
pub const DATA_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub subject: String,
    pub c_src: Vec<u8>,
    pub c_tgt: Vec<u8>,
    pub n_inputs: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Ablation columns: the plain decode without the attention residual.
    pub psnr_plain: f64,
    pub ssim_plain: f64,
    pub perceptual_plain: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

fn stats(values: &[f64]) -> Stats {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Stats {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub n_tasks: usize,
    pub psnr: Stats,
    pub ssim: Stats,
    pub perceptual: Stats,
    pub psnr_plain: Stats,
    pub ssim_plain: Stats,
    pub perceptual_plain: Stats,
}

fn group_report(records: &[&TaskRecord]) -> GroupReport {
    let collect = |f: fn(&TaskRecord) -> f64| -> Vec<f64> { records.iter().map(|r| f(r)).collect() };
    GroupReport {
        n_tasks: records.len(),
        psnr: stats(&collect(|r| r.psnr)),
        ssim: stats(&collect(|r| r.ssim)),
        perceptual: stats(&collect(|r| r.perceptual)),
        psnr_plain: stats(&collect(|r| r.psnr_plain)),
        ssim_plain: stats(&collect(|r| r.ssim_plain)),
        perceptual_plain: stats(&collect(|r| r.perceptual_plain)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_subjects: usize,
    /// Group key is the input-set size, mirroring the "number of inputs"
    /// presentation.
    pub by_input_count: BTreeMap<usize, GroupReport>,
    pub aggregate: GroupReport,
    pub per_task: Vec<TaskRecord>,
}

/// Evaluate one checkpointed model on the fixed tasks of the given
/// subjects. Deterministic: subjects are processed in the given order and
/// statistics accumulate in that order.
pub fn evaluate(
    model: &ModelParams<f32>,
    frozen: &FrozenFeatureNet<f32>,
    dataset: &Dataset,
    subjects: &[String],
    split_name: &str,
) -> Result<EvalReport> {
    let n = dataset.n_sequences();
    let mut per_task = Vec::with_capacity(subjects.len());
    for (subject, code) in fixed_eval_tasks(subjects, n) {
        let sample = dataset.load_sample(&subject)?;
        let record = evaluate_task(model, frozen, &sample.images, &code, &subject)?;
        per_task.push(record);
    }

    let mut by_input_count = BTreeMap::new();
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = per_task.iter().map(|r| r.n_inputs).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    for size in sizes {
        let group: Vec<&TaskRecord> = per_task.iter().filter(|r| r.n_inputs == size).collect();
        by_input_count.insert(size, group_report(&group));
    }
    let all: Vec<&TaskRecord> = per_task.iter().collect();
    Ok(EvalReport {
        split: split_name.to_string(),
        n_subjects: subjects.len(),
        by_input_count,
        aggregate: group_report(&all),
        per_task,
    })
}

/// Metrics for one (sample, task) pair.
pub fn evaluate_task(
    model: &ModelParams<f32>,
    frozen: &FrozenFeatureNet<f32>,
    images: &[Tensor<f32>],
    code: &TaskCode,
    subject: &str,
) -> Result<TaskRecord> {
    let slots: Vec<Option<Tensor<f32>>> = (0..code.n())
        .map(|i| code.is_available(i).then(|| images[i].clone()))
        .collect();
    let out = synthesize(model, &slots, code)?;
    let target = &images[code.target()];
    Ok(TaskRecord {
        subject: subject.to_string(),
        c_src: code.src_vec::<f32>().iter().map(|&v| v as u8).collect(),
        c_tgt: code.tgt_vec::<f32>().iter().map(|&v| v as u8).collect(),
        n_inputs: code.available_count(),
        psnr: psnr(&out.x_attended, target, DATA_RANGE)?,
        ssim: ssim(&out.x_attended, target, DATA_RANGE)?,
        perceptual: perceptual_distance(&out.x_attended, target, frozen)? as f64,
        psnr_plain: psnr(&out.x_plain, target, DATA_RANGE)?,
        ssim_plain: ssim(&out.x_plain, target, DATA_RANGE)?,
        perceptual_plain: perceptual_distance(&out.x_plain, target, frozen)? as f64,
    })
}
