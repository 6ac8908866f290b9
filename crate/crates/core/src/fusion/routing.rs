//! Content-aware top-k routing over the feature bank and weighted
//! aggregation.

use super::bank::FeatureBank;
use super::params::FusionParams;
use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};

/// Per-token routing decision: router logits, the top-k layer slots and the
/// softmax weights over those slots (zero elsewhere).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRoutingPlan {
    pub logits: Array,
    pub selected: Vec<Vec<usize>>,
    pub weights: Array,
}

impl SparseRoutingPlan {
    /// Every slot selected with weight `1 / m`.
    pub fn uniform(tokens: usize, m: usize) -> Self {
        Self {
            logits: Array::zeros(&[tokens, m]),
            selected: vec![(0..m).collect(); tokens],
            weights: Array::full(&[tokens, m], 1.0 / m as f64),
        }
    }

    /// Each token routed entirely to `slots[l]`.
    pub fn one_hot(slots: &[usize], m: usize) -> Self {
        let l = slots.len();
        let mut weights = Array::zeros(&[l, m]);
        let mut logits = Array::zeros(&[l, m]);
        for (t, &s) in slots.iter().enumerate() {
            weights.data_mut()[t * m + s] = 1.0;
            logits.data_mut()[t * m + s] = 1.0;
        }
        Self {
            logits,
            selected: slots.iter().map(|&s| vec![s]).collect(),
            weights,
        }
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Slot with the largest weight for token `l` (lowest slot on ties).
    pub fn top_slot(&self, l: usize) -> usize {
        let row = self.weights.row(l);
        let mut best = 0;
        for (i, &w) in row.iter().enumerate() {
            if w > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Records router logits, top-k selection and the masked softmax.
/// Returns the weight node and the plan.
pub fn route_on(tape: &mut Tape, q: Var, params: &FusionParams) -> Result<(Var, SparseRoutingPlan)> {
    let router = params
        .router
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("variant {} has no router", params.variant)))?;
    if router.output_width() != params.m() {
        return Err(Error::invalid(format!(
            "router emits {} logits for {} bank layers",
            router.output_width(),
            params.m()
        )));
    }
    let logits = router.forward(tape, q)?;
    let selected = tape.topk_rows(logits, params.k)?;
    let weights = tape.masked_softmax(logits, selected.clone())?;
    let plan = SparseRoutingPlan {
        logits: tape.value(logits).clone(),
        selected,
        weights: tape.value(weights).clone(),
    };
    Ok((weights, plan))
}

/// Routing plan for the query tokens `q` (`L x D`).
pub fn route(q: &Array, params: &FusionParams) -> Result<SparseRoutingPlan> {
    let mut tape = Tape::inference();
    let q = tape.constant(q.clone())?;
    Ok(route_on(&mut tape, q, params)?.1)
}

/// `F_hat[l] = sum_i alpha[l, i] * bank[l, i]`.
pub fn aggregate(bank: &FeatureBank, plan: &SparseRoutingPlan) -> Result<Array> {
    if plan.weights.shape() != [bank.tokens(), bank.m()] {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            left: plan.weights.shape().to_vec(),
            right: bank.entries.shape().to_vec(),
        });
    }
    let mut tape = Tape::inference();
    let w = tape.constant(plan.weights.clone())?;
    let b = tape.constant(bank.entries.clone())?;
    let out = tape.weighted_layer_sum(w, b)?;
    Ok(tape.value(out).clone())
}

/// Unweighted mean of the bank over its layers.
pub fn aggregate_mean(bank: &FeatureBank) -> Result<Array> {
    let mut tape = Tape::inference();
    let b = tape.constant(bank.entries.clone())?;
    let out = tape.mean_layers(b)?;
    Ok(tape.value(out).clone())
}

/// Mean routing weight of each bank slot over all tokens.
pub fn routing_summary(plan: &SparseRoutingPlan) -> Vec<f64> {
    let (l, m) = (plan.tokens(), plan.m());
    let mut out = vec![0.0; m];
    for t in 0..l {
        for (o, &w) in out.iter_mut().zip(plan.weights.row(t)) {
            *o += w;
        }
    }
    out.iter_mut().for_each(|o| *o /= l as f64);
    out
}

/// Token-weighted mean of several summaries (one per sequence).
pub fn pooled_summary(plans: &[SparseRoutingPlan]) -> Option<Vec<f64>> {
    let m = plans.first()?.m();
    let total: usize = plans.iter().map(SparseRoutingPlan::tokens).sum();
    let mut out = vec![0.0; m];
    for p in plans {
        for t in 0..p.tokens() {
            for (o, &w) in out.iter_mut().zip(p.weights.row(t)) {
                *o += w;
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= total as f64);
    Some(out)
}
