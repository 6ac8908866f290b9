use crate::error::{Error, Result};
use crate::fusion::{SparseRoutingPlan, Variant};

use super::scene::SceneSpec;

/// Per-task mean squared error; tasks without tokens are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub per_task: Vec<Option<f64>>,
    /// Unweighted mean over the tasks that are present.
    pub aggregate: f64,
}

/// Accumulates squared errors by task.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl MetricsAccumulator {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            sums: vec![0.0; num_tasks],
            counts: vec![0; num_tasks],
        }
    }

    pub fn add(&mut self, predictions: &[f64], targets: &[f64], tasks: &[usize]) -> Result<()> {
        if predictions.len() != targets.len() || tasks.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} predictions, {} targets, {} task labels",
                predictions.len(),
                targets.len(),
                tasks.len()
            )));
        }
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.sums.len()) {
            return Err(Error::invalid(format!("task id {t} outside 0..{}", self.sums.len())));
        }
        for ((p, y), &t) in predictions.iter().zip(targets).zip(tasks) {
            self.sums[t] += (p - y) * (p - y);
            self.counts[t] += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<TaskMetrics> {
        let per_task: Vec<Option<f64>> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect();
        let present: Vec<f64> = per_task.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::invalid("no tokens to score"));
        }
        Ok(TaskMetrics {
            aggregate: present.iter().sum::<f64>() / present.len() as f64,
            per_task,
        })
    }
}

pub fn task_metrics(predictions: &[f64], targets: &[f64], tasks: &[usize], num_tasks: usize) -> Result<TaskMetrics> {
    let mut acc = MetricsAccumulator::new(num_tasks);
    acc.add(predictions, targets, tasks)?;
    acc.finish()
}

/// Bank slot whose source layer is closest to `layer` (lower slot on ties).
pub fn nearest_slot(source_layers: &[usize], layer: usize) -> Option<usize> {
    source_layers
        .iter()
        .enumerate()
        .min_by_key(|(_, &s)| s.abs_diff(layer))
        .map(|(i, _)| i)
}

/// Fraction of tokens whose highest-weight slot is the bank layer nearest
/// to their task's planted layer. `tasks[i]` labels the tokens of
/// `plans[i]`.
pub fn layer_preference_recovery(
    variant: Variant,
    plans: &[SparseRoutingPlan],
    tasks: &[&[usize]],
    source_layers: &[usize],
    spec: &SceneSpec,
) -> Result<f64> {
    if !variant.is_routed() {
        return Err(Error::invalid(format!(
            "layer preference recovery needs a routed variant, got {variant}"
        )));
    }
    if plans.len() != tasks.len() {
        return Err(Error::invalid(format!("{} plans for {} task lists", plans.len(), tasks.len())));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (plan, labels) in plans.iter().zip(tasks) {
        if plan.tokens() != labels.len() || plan.m() != source_layers.len() {
            return Err(Error::invalid("plan does not match its task labels or bank"));
        }
        for (l, &t) in labels.iter().enumerate() {
            let planted = *spec
                .planted_layers
                .get(t)
                .ok_or_else(|| Error::invalid(format!("task id {t} has no planted layer")))?;
            let want = nearest_slot(source_layers, planted).expect("bank is nonempty");
            hits += usize::from(plan.top_slot(l) == want);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("no routed tokens"));
    }
    Ok(hits as f64 / total as f64)
}
