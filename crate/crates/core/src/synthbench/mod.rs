//! Synthetic task-misalignment benchmark. A simulated encoder hides each
//! task's regression target at full strength in one planted layer, with the
//! target fading into per-layer distractors away from it. A toy residual
//! backbone reads out per-task predictions after fusion.

mod ablation;
mod backbone;
mod metrics;
mod scene;

pub use ablation::{
    evaluate_model, ordering_holds, relative_gap, run_ablation, run_cell, AblationRow, Budget, EvalReport, TrainedCell,
};
pub use backbone::{backbone_forward, Block, ForwardPass, Model, ModelConfig, SequenceOutput, ToyBackbone};
pub use metrics::{layer_preference_recovery, nearest_slot, task_metrics, MetricsAccumulator, TaskMetrics};
pub use scene::{generate_batch, SceneGenerator, SceneSpec, SyntheticBatch};

use crate::error::Result;
use crate::numerics::{Tape, Var};
use crate::trainer::{BatchSource, Objective};

impl Objective for Model {
    type Sample = SyntheticBatch;
    type Output = SequenceOutput;

    fn forward(&self, tape: &mut Tape, sample: &SyntheticBatch) -> Result<(Var, SequenceOutput)> {
        let (loss, pass) = self.loss_on(tape, sample)?;
        let predictions = tape.value(pass.predictions).data().to_vec();
        Ok((
            loss,
            SequenceOutput {
                predictions,
                plan: pass.plan,
            },
        ))
    }
}

/// Sequence index where held-out evaluation data starts.
pub const EVAL_OFFSET: u64 = 1 << 40;

/// Training batches: batch `i` holds sequences `i * batch_size ..`.
#[derive(Clone, Debug)]
pub struct SceneStream {
    pub generator: SceneGenerator,
    pub batch_size: usize,
    pub offset: u64,
}

impl SceneStream {
    pub fn new(generator: SceneGenerator, batch_size: usize) -> Self {
        Self {
            generator,
            batch_size,
            offset: 0,
        }
    }

    /// Held-out stream over the same encoder.
    pub fn held_out(generator: SceneGenerator, batch_size: usize) -> Self {
        Self {
            generator,
            batch_size,
            offset: EVAL_OFFSET,
        }
    }

    pub fn batches(&self, count: usize) -> Vec<Vec<SyntheticBatch>> {
        (0..count).map(|i| self.sequences(i)).collect()
    }

    fn sequences(&self, index: usize) -> Vec<SyntheticBatch> {
        let start = self.offset + (index * self.batch_size) as u64;
        (0..self.batch_size as u64)
            .map(|j| self.generator.sequence(start + j))
            .collect()
    }
}

impl BatchSource for SceneStream {
    type Sample = SyntheticBatch;

    fn batch(&self, index: usize) -> Result<Vec<SyntheticBatch>> {
        Ok(self.sequences(index))
    }
}
