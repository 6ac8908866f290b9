use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::optim::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState};
use super::schedule::{lr_at, ScheduleSpec};
use crate::error::{Error, Result};
use crate::numerics::{Array, Parameterized, Tape, Var};

/// A model with a scalar per-sample loss.
pub trait Objective: Parameterized {
    type Sample;
    type Output;

    /// Records the loss for one sample on `tape`, plus whatever the caller
    /// wants back at evaluation time.
    fn forward(&self, tape: &mut Tape, sample: &Self::Sample) -> Result<(Var, Self::Output)>;
}

/// Deterministic batches addressed by index.
pub trait BatchSource {
    type Sample;

    fn batch(&self, index: usize) -> Result<Vec<Self::Sample>>;
}

impl<S: Clone> BatchSource for Vec<Vec<S>> {
    type Sample = S;

    fn batch(&self, index: usize) -> Result<Vec<S>> {
        if self.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        Ok(self[index % self.len()].clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Parameters whose name starts with one of these prefixes are frozen.
    pub frozen: Vec<String>,
    pub optimizer: AdamWConfig,
    /// Maximum global gradient norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 1,
            seed: 0,
            frozen: Vec::new(),
            optimizer: AdamWConfig::default(),
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<StepRecord>,
}

impl LossLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `step,lr,loss` rows, shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.step, r.lr, r.loss).expect("writing to a String");
        }
        out
    }
}

/// Mean loss over `batch` and the gradient of that mean for every trainable
/// parameter. Each sample gets its own tape; gradients are summed in sample
/// order.
pub fn batch_gradients<M: Objective>(
    model: &M,
    batch: &[M::Sample],
    frozen: &[String],
) -> Result<(f64, BTreeMap<String, Array>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut grads: BTreeMap<String, Array> = BTreeMap::new();
    for sample in batch {
        let mut tape = Tape::new().with_frozen(frozen);
        let (loss, _) = model.forward(&mut tape, sample)?;
        loss_sum += tape.value(loss).item();
        let scaled = tape.scale(loss, 1.0 / n)?;
        tape.backward(scaled)?;
        for (name, g) in tape.param_grads() {
            match grads.get_mut(&name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    Ok((loss_sum / n, grads))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: LossLog,
    pub state: OptimizerState,
}

/// Runs `schedule.total_steps` AdamW steps. Step `s` uses batch
/// `s mod ceil(total_steps / epochs)` and learning rate `lr_at(s)`. The
/// logged loss is measured before that step's update.
pub fn train_loop<M, S>(model: &mut M, data: &S, cfg: &TrainConfig, schedule: &ScheduleSpec) -> Result<TrainOutcome>
where
    M: Objective,
    S: BatchSource<Sample = M::Sample>,
{
    train_loop_with(model, data, cfg, schedule, |_, _| {})
}

/// [`train_loop`] with a callback after every step.
pub fn train_loop_with<M, S>(
    model: &mut M,
    data: &S,
    cfg: &TrainConfig,
    schedule: &ScheduleSpec,
    mut on_step: impl FnMut(&M, &StepRecord),
) -> Result<TrainOutcome>
where
    M: Objective,
    S: BatchSource<Sample = M::Sample>,
{
    schedule.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be positive"));
    }
    let per_epoch = schedule.total_steps.div_ceil(cfg.epochs).max(1);
    let mut state = OptimizerState::new(cfg.optimizer.clone());
    let mut log = LossLog::default();
    for step in 0..schedule.total_steps {
        let batch = data.batch(step % per_epoch)?;
        let (loss, mut grads) = batch_gradients(model, &batch, &cfg.frozen).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(max_norm) = cfg.clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        let lr = lr_at(step, schedule)?;
        let mut params: Vec<_> = model
            .params_mut()
            .into_iter()
            .filter(|p| !cfg.is_frozen(&p.name))
            .collect();
        adamw_step(&mut params, &grads, &mut state, lr)?;
        let record = StepRecord { step, lr, loss };
        log.records.push(record);
        on_step(model, &record);
    }
    Ok(TrainOutcome { log, state })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation<O> {
    /// Mean of the per-batch losses.
    pub mean_loss: f64,
    pub batch_losses: Vec<f64>,
    pub outputs: Vec<Vec<O>>,
}

/// Loss and outputs on fixed batches; no gradients are recorded.
pub fn evaluate<M: Objective>(model: &M, batches: &[Vec<M::Sample>]) -> Result<Evaluation<M::Output>> {
    if batches.is_empty() || batches.iter().any(Vec::is_empty) {
        return Err(Error::invalid("evaluation needs at least one nonempty batch"));
    }
    let mut batch_losses = Vec::with_capacity(batches.len());
    let mut outputs = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut sum = 0.0;
        let mut outs = Vec::with_capacity(batch.len());
        for sample in batch {
            let mut tape = Tape::inference();
            let (loss, out) = model.forward(&mut tape, sample)?;
            sum += tape.value(loss).item();
            outs.push(out);
        }
        batch_losses.push(sum / batch.len() as f64);
        outputs.push(outs);
    }
    let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
    Ok(Evaluation {
        mean_loss,
        batch_losses,
        outputs,
    })
}
