//! Optimization loop: SGD with momentum, stepped learning-rate schedule,
//! per-iteration path sampling, and NDJSON metric emission.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bridges::BridgeSet;
use crate::data::{augment, make_batch, ImageDataset};
use crate::error::{FcfdError, Result};
use crate::graph::{Graph, Scalar};
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::params::ParamStore;
use crate::pathing::{sample_paths, MissingStatsPolicy, Mode, SamplerConfig};
use crate::staged::StagedModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Teacher frozen; only student and bridges update.
    Offline,
    /// Teacher trains jointly: its own task loss plus a reversed
    /// output-matching term towards the student.
    Online,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub mode: TrainMode,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.05,
            lr_milestones: vec![18, 24],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            eval_every: 5,
            mode: TrainMode::Offline,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FcfdError::Config("trainer: epochs must be positive".into()));
        }
        // Batch statistics are undefined for a single sample.
        if self.batch_size < 2 {
            return Err(FcfdError::Config("trainer: batch_size must be >= 2".into()));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(FcfdError::Config(
                "trainer: lr_milestones must be strictly increasing".into(),
            ));
        }
        if self.lr_milestones.iter().any(|&m| m >= self.epochs) {
            return Err(FcfdError::Config(
                "trainer: lr_milestones must be < epochs".into(),
            ));
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(FcfdError::Config(
                "trainer: base_lr and lr_decay must be > 0".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(FcfdError::Config("trainer: eval_every must be > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.lr_decay.powi(hits as i32)
    }
}

/// Heavy-ball SGD state for one parameter store.
pub struct SgdState<F: Scalar> {
    velocity: Vec<ndarray::ArrayD<F>>,
}

impl<F: Scalar> SgdState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        SgdState {
            velocity: params
                .entries()
                .iter()
                .map(|e| ndarray::ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    /// v = momentum*v + grad + wd*value; value -= lr*v.
    pub fn step(&mut self, params: &mut ParamStore<F>, lr: f64, momentum: f64, weight_decay: f64) {
        let m = F::f(momentum);
        let wd = F::f(weight_decay);
        let lr = F::f(lr);
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            ndarray::Zip::from(&mut *v)
                .and(&e.grad)
                .and(&e.value)
                .for_each(|v, &g, &p| *v = *v * m + g + p * wd);
            ndarray::Zip::from(&mut e.value)
                .and(&*v)
                .for_each(|p, &v| *p = *p - lr * v);
        }
    }
}

/// One NDJSON record per call.
pub struct MetricsSink<'a> {
    out: Option<&'a mut dyn Write>,
}

impl<'a> MetricsSink<'a> {
    pub fn new(out: &'a mut dyn Write) -> Self {
        MetricsSink { out: Some(out) }
    }

    pub fn none() -> Self {
        MetricsSink { out: None }
    }

    pub fn emit(&mut self, record: &serde_json::Value) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            serde_json::to_writer(&mut *w, record)
                .map_err(|e| FcfdError::Config(format!("metrics serialization: {e}")))?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Top-1 accuracy of `model` on `ds` in eval mode. Running statistics are
/// read, never written.
pub fn evaluate<F: Scalar>(
    model: &mut StagedModel<F>,
    ds: &ImageDataset,
    mean: &[f64],
    std: &[f64],
    batch_size: usize,
    policy: &MissingStatsPolicy,
) -> Result<f64> {
    let mut correct = 0usize;
    let n = ds.len();
    let mut i = 0;
    while i < n {
        let hi = (i + batch_size).min(n);
        let indices: Vec<usize> = (i..hi).collect();
        let batch = make_batch::<F>(ds, &indices, mean, std);
        let mut g = Graph::new();
        let (logits, _) = model.forward_full(&mut g, &batch.x, Mode::Eval, policy)?;
        let lv = g.value(logits);
        let lv = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (row, &label) in lv.outer_iter().zip(&batch.y) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok(correct as f64 / n as f64)
}

pub struct TrainOutcome {
    /// (epoch, accuracy) for each evaluation point.
    pub eval_history: Vec<(usize, f64)>,
    pub final_accuracy: f64,
    pub last_report: Option<LossReport>,
    pub iterations: u64,
}

/// Trains a single model with plain cross-entropy. Used for teacher
/// pretraining and the supervised baseline.
pub fn train_task_only<F: Scalar>(
    model: &mut StagedModel<F>,
    train: &ImageDataset,
    eval: &ImageDataset,
    cfg: &TrainConfig,
    sink: &mut MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mean, std) = train.channel_stats();
    let mut opt = SgdState::new(&model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7777));
    let mut history = Vec::new();
    let mut iters = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut indices: Vec<usize> = (0..train.len()).collect();
        order_rng.set_stream(epoch as u64);
        indices.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = make_batch::<F>(train, chunk, &mean, &std);
            let x = if cfg.augment {
                augment(&batch.x, &mut aug_rng)
            } else {
                batch.x.clone()
            };
            let mut g = Graph::new();
            let (logits, _) =
                model.forward_full(&mut g, &x, Mode::Train, &MissingStatsPolicy::Strict)?;
            let loss = g.softmax_cross_entropy(logits, &batch.y);
            let lv = g.scalar(loss).to_f64().unwrap();
            if !lv.is_finite() {
                return Err(FcfdError::NonFinite {
                    term: "task loss".into(),
                    path: None,
                });
            }
            epoch_loss += lv;
            batches += 1;
            let grads = g.backward(loss);
            model.params.zero_grads();
            model.params.accumulate(&g, &grads);
            opt.step(&mut model.params, lr, cfg.momentum, cfg.weight_decay);
            iters += 1;
        }
        sink.emit(&json!({
            "event": "epoch",
            "epoch": epoch,
            "lr": lr,
            "loss": epoch_loss / batches.max(1) as f64,
        }))?;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let acc = evaluate(model, eval, &mean, &std, cfg.batch_size, &MissingStatsPolicy::Strict)?;
            history.push((epoch, acc));
            sink.emit(&json!({"event": "eval", "epoch": epoch, "accuracy": acc}))?;
        }
    }
    let final_accuracy = history.last().map(|&(_, a)| a).unwrap_or(0.0);
    Ok(TrainOutcome {
        eval_history: history,
        final_accuracy,
        last_report: None,
        iterations: iters,
    })
}

/// Distillation training. Offline mode freezes the teacher; online mode also
/// optimizes the teacher with its own task loss plus a reversed
/// output-matching term towards the student.
#[allow(clippy::too_many_arguments)]
pub fn train_distill<F: Scalar>(
    teacher: &mut StagedModel<F>,
    student: &mut StagedModel<F>,
    bridges: &mut BridgeSet<F>,
    train: &ImageDataset,
    eval: &ImageDataset,
    cfg: &TrainConfig,
    weights: &LossWeights,
    sampler: &SamplerConfig,
    sink: &mut MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    let sampling = weights.enable_func || weights.enable_func_prime;
    if sampling {
        sampler.validate()?;
    }
    let positions = sampler.candidate_positions.clone();
    let (mean, std) = train.channel_stats();

    teacher.params.frozen = cfg.mode == TrainMode::Offline;
    let mut s_opt = SgdState::new(&student.params);
    let mut b_opt = SgdState::new(&bridges.params);
    let mut t_opt = SgdState::new(&teacher.params);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7777));
    let mut history = Vec::new();
    let mut last_report: Option<LossReport> = None;
    let mut iter = 0u64;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut indices: Vec<usize> = (0..train.len()).collect();
        order_rng.set_stream(epoch as u64);
        indices.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = make_batch::<F>(train, chunk, &mean, &std);
            let x = if cfg.augment {
                augment(&batch.x, &mut aug_rng)
            } else {
                batch.x.clone()
            };
            let sampled = if sampling {
                sample_paths(sampler, iter)?
            } else {
                Vec::new()
            };
            let mut g = Graph::new();
            let out = total_loss(
                &mut g,
                teacher,
                student,
                bridges,
                &x,
                &batch.y,
                &positions,
                &sampled,
                weights,
                Mode::Train,
                &MissingStatsPolicy::Strict,
            );
            let out = match out {
                Ok(o) => o,
                Err(e) => {
                    sink.emit(&json!({
                        "event": "abort",
                        "epoch": epoch,
                        "iter": iter,
                        "error": e.to_string(),
                        "last_report": last_report,
                    }))?;
                    return Err(e);
                }
            };
            let mut objective = out.total;
            if cfg.mode == TrainMode::Online {
                // Teacher-side terms: its own task loss and a reversed
                // output-matching term, gradients reaching the teacher only.
                let t_task = g.softmax_cross_entropy(out.teacher_logits, &batch.y);
                let rev =
                    g.kl_tempered(out.student_logits, out.teacher_logits, F::f(weights.temperature));
                let wt = g.mul_scalar(t_task, F::f(weights.w_task));
                let wr = g.mul_scalar(rev, F::f(weights.w_kd));
                objective = g.sum_n(&[objective, wt, wr]);
            }
            epoch_loss += out.report.total;
            batches += 1;
            last_report = Some(out.report);

            let grads = g.backward(objective);
            student.params.zero_grads();
            bridges.params.zero_grads();
            student.params.accumulate(&g, &grads);
            bridges.params.accumulate(&g, &grads);
            s_opt.step(&mut student.params, lr, cfg.momentum, cfg.weight_decay);
            b_opt.step(&mut bridges.params, lr, cfg.momentum, cfg.weight_decay);
            if cfg.mode == TrainMode::Online {
                teacher.params.zero_grads();
                teacher.params.accumulate(&g, &grads);
                t_opt.step(&mut teacher.params, lr, cfg.momentum, cfg.weight_decay);
            }
            iter += 1;
        }
        sink.emit(&json!({
            "event": "epoch",
            "epoch": epoch,
            "lr": lr,
            "loss": epoch_loss / batches.max(1) as f64,
            "breakdown": last_report,
        }))?;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let acc = evaluate(
                student,
                eval,
                &mean,
                &std,
                cfg.batch_size,
                &MissingStatsPolicy::Strict,
            )?;
            history.push((epoch, acc));
            sink.emit(&json!({"event": "eval", "epoch": epoch, "accuracy": acc}))?;
        }
    }
    let final_accuracy = history.last().map(|&(_, a)| a).unwrap_or(0.0);
    Ok(TrainOutcome {
        eval_history: history,
        final_accuracy,
        last_report,
        iterations: iter,
    })
}
