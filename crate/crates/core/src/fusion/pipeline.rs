use super::bank::{build_bank_on, gather_sources, RawLayerFeature};
use super::inject::inject_on;
use super::params::{Aggregation, FusionParams, Variant};
use super::routing::{route_on, SparseRoutingPlan};
use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};

/// Nodes produced by one fusion pass.
#[derive(Debug)]
pub struct FuseOutput {
    pub q_hat: Var,
    pub f_hat: Option<Var>,
    /// Present only for routed variants.
    pub plan: Option<SparseRoutingPlan>,
}

/// Aggregated feature `F_hat` for the variant, plus the routing plan when
/// the variant routes.
pub fn aggregate_on(
    tape: &mut Tape,
    q: Var,
    raw: &[RawLayerFeature],
    params: &FusionParams,
) -> Result<Option<(Var, Option<SparseRoutingPlan>)>> {
    let aggregation = params.variant.aggregation();
    if aggregation == Aggregation::None {
        return Ok(None);
    }
    let tokens = tape.value(q).dims2()?.0;
    if let Some(src) = gather_sources(raw, &params.source_layers)?.first() {
        let raw_tokens = src.values.dims2()?.0;
        if raw_tokens != tokens {
            return Err(Error::ShapeMismatch {
                op: "fuse (token count)",
                left: tape.value(q).shape().to_vec(),
                right: src.values.shape().to_vec(),
            });
        }
    }
    let bank = build_bank_on(tape, raw, params)?;
    Ok(Some(match aggregation {
        Aggregation::Single | Aggregation::Mean => (tape.mean_layers(bank)?, None),
        Aggregation::Routed => {
            let (weights, plan) = route_on(tape, q, params)?;
            (tape.weighted_layer_sum(weights, bank)?, Some(plan))
        }
        Aggregation::None => unreachable!(),
    }))
}

/// Full fusion pass on a tape: bank, aggregation, injection.
pub fn fuse_on(tape: &mut Tape, q: Var, raw: &[RawLayerFeature], params: &FusionParams) -> Result<FuseOutput> {
    match aggregate_on(tape, q, raw, params)? {
        None => Ok(FuseOutput {
            q_hat: q,
            f_hat: None,
            plan: None,
        }),
        Some((f_hat, plan)) => Ok(FuseOutput {
            q_hat: inject_on(tape, q, f_hat, params)?,
            f_hat: Some(f_hat),
            plan,
        }),
    }
}

/// Fuses encoder features into the query tokens `q` (`L x D`).
pub fn fuse(
    q: &Array,
    raw: &[RawLayerFeature],
    params: &FusionParams,
) -> Result<(Array, Option<SparseRoutingPlan>)> {
    let mut tape = Tape::inference();
    let qv = tape.constant(q.clone())?;
    let out = fuse_on(&mut tape, qv, raw, params)?;
    Ok((tape.value(out.q_hat).clone(), out.plan))
}

/// Aggregated feature of the `Single(j)` variant: layer `j` normalized and
/// projected, with nothing else mixed in.
pub fn select_single(raw: &[RawLayerFeature], params: &FusionParams) -> Result<Array> {
    let Variant::Single(_) = params.variant else {
        return Err(Error::invalid(format!(
            "select_single needs a Single variant, got {}",
            params.variant
        )));
    };
    let mut tape = Tape::inference();
    let bank = build_bank_on(&mut tape, raw, params)?;
    let f = tape.mean_layers(bank)?;
    Ok(tape.value(f).clone())
}
