use crate::error::{Error, Result};
use crate::fusion::{pooled_summary, SparseRoutingPlan, Variant};
use crate::trainer::{evaluate, train_loop, LossLog, ScheduleSpec, TrainConfig};

use super::backbone::{Model, ModelConfig, SequenceOutput};
use super::metrics::{layer_preference_recovery, MetricsAccumulator, TaskMetrics};
use super::scene::{SceneGenerator, SceneSpec, SyntheticBatch};
use super::SceneStream;

/// Training budget shared by every cell of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Budget {
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    /// Held-out batches (of `train.batch_size` sequences) for scoring.
    pub eval_batches: usize,
}

/// Scores of a trained model on held-out data.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: TaskMetrics,
    pub mean_loss: f64,
    /// One plan per evaluated sequence (routed variants only).
    pub plans: Vec<SparseRoutingPlan>,
    /// Mean routing weight per bank slot (routed variants only).
    pub routing_summary: Option<Vec<f64>>,
    /// Routed variants only.
    pub recovery: Option<f64>,
}

/// Per-task metrics, routing summary and preference recovery over `batches`.
pub fn evaluate_model(model: &Model, spec: &SceneSpec, batches: &[Vec<SyntheticBatch>]) -> Result<EvalReport> {
    let eval = evaluate(model, batches)?;
    let mut acc = MetricsAccumulator::new(spec.num_tasks);
    let mut plans = Vec::new();
    let mut labels: Vec<&[usize]> = Vec::new();
    for (batch, outs) in batches.iter().zip(&eval.outputs) {
        for (seq, SequenceOutput { predictions, plan }) in batch.iter().zip(outs) {
            acc.add(predictions, seq.targets.data(), &seq.task_of_token)?;
            if let Some(p) = plan {
                plans.push(p.clone());
                labels.push(&seq.task_of_token);
            }
        }
    }
    let variant = model.fusion.variant;
    let (routing_summary, recovery) = if variant.is_routed() {
        (
            pooled_summary(&plans),
            Some(layer_preference_recovery(
                variant,
                &plans,
                &labels,
                &model.fusion.source_layers,
                spec,
            )?),
        )
    } else {
        (None, None)
    };
    Ok(EvalReport {
        metrics: acc.finish()?,
        mean_loss: eval.mean_loss,
        plans,
        routing_summary,
        recovery,
    })
}

/// A model trained from `cfg` with `budget` on the stream of `spec`.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub model: Model,
    pub log: LossLog,
    pub report: EvalReport,
}

/// Trains one model and scores it on held-out sequences.
pub fn run_cell(spec: &SceneSpec, cfg: &ModelConfig, budget: &Budget) -> Result<TrainedCell> {
    let generator = SceneGenerator::new(spec.clone())?;
    let stream = SceneStream::new(generator.clone(), budget.train.batch_size);
    let held_out = SceneStream::held_out(generator, budget.train.batch_size).batches(budget.eval_batches);
    let mut model = Model::new(cfg, budget.train.seed)?;
    let outcome = train_loop(&mut model, &stream, &budget.train, &budget.schedule)?;
    let report = evaluate_model(&model, spec, &held_out)?;
    Ok(TrainedCell {
        model,
        log: outcome.log,
        report,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub final_loss: Option<f64>,
}

/// Trains every variant in `grid` with identical seeds, data and budget.
/// `base` supplies everything but the variant.
pub fn run_ablation(grid: &[Variant], spec: &SceneSpec, base: &ModelConfig, budget: &Budget) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::invalid("empty ablation grid"));
    }
    grid.iter()
        .map(|&variant| {
            let mut cfg = base.clone();
            cfg.fusion.variant = variant;
            let cell = run_cell(spec, &cfg, budget)?;
            Ok(AblationRow {
                variant,
                final_loss: cell.log.records.last().map(|r| r.loss),
                report: cell.report,
            })
        })
        .collect()
}

/// Relative gap `(worse - better) / worse`.
pub fn relative_gap(better: f64, worse: f64) -> f64 {
    (worse - better) / worse
}

/// True when aggregate MSE strictly increases along `rows` with every
/// consecutive relative gap at least `min_gap`.
pub fn ordering_holds(rows: &[&AblationRow], min_gap: f64) -> bool {
    rows.windows(2).all(|w| {
        relative_gap(w[0].report.metrics.aggregate, w[1].report.metrics.aggregate) >= min_gap
    })
}
