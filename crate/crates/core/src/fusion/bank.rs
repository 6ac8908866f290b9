//! Candidate-layer selection and feature-bank construction.

use super::params::{FusionParams, SelectionStrategy};
use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};

/// Output of one encoder layer for one sequence: `L' x D'`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLayerFeature {
    pub layer_index: usize,
    pub values: Array,
}

/// Normalized, projected features of `M` encoder layers, stored `L x M x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub entries: Array,
    pub source_layers: Vec<usize>,
}

impl FeatureBank {
    pub fn new(entries: Array, source_layers: Vec<usize>) -> Result<Self> {
        match entries.shape() {
            &[_, m, _] if m == source_layers.len() => {}
            s => {
                return Err(Error::invalid(format!(
                    "bank entries {s:?} do not match {} source layers",
                    source_layers.len()
                )))
            }
        }
        if source_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bank source layers must be strictly increasing"));
        }
        Ok(Self {
            entries,
            source_layers,
        })
    }

    pub fn tokens(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.entries.shape()[2]
    }

    /// The `D`-vector of layer slot `i` for token `l`.
    pub fn entry(&self, l: usize, i: usize) -> &[f64] {
        let (m, d) = (self.m(), self.width());
        &self.entries.data()[(l * m + i) * d..(l * m + i + 1) * d]
    }

    /// Slot `i` as an `L x D` matrix.
    pub fn slice(&self, i: usize) -> Array {
        let (l, d) = (self.tokens(), self.width());
        let data = (0..l).flat_map(|t| self.entry(t, i).to_vec()).collect();
        Array::matrix(l, d, data).expect("slice shape")
    }
}

/// Global indices of the `m` candidate layers of a `total_depth`-layer
/// encoder.
pub fn select_layers(total_depth: usize, m: usize, strategy: SelectionStrategy) -> Result<Vec<usize>> {
    if m == 0 || m > total_depth {
        return Err(Error::invalid(format!(
            "cannot select {m} layers from an encoder of depth {total_depth}"
        )));
    }
    Ok(match strategy {
        SelectionStrategy::LatterHalf => (total_depth - m..total_depth).collect(),
        SelectionStrategy::FormerHalf => (0..m).collect(),
        SelectionStrategy::Uniform => (0..m).map(|i| i * total_depth / m).collect(),
    })
}

/// Picks the raw features for `source_layers`, in bank order, and checks
/// they agree on `L'` and `D'`.
pub(crate) fn gather_sources<'a>(
    raw: &'a [RawLayerFeature],
    source_layers: &[usize],
) -> Result<Vec<&'a RawLayerFeature>> {
    let depth = raw.iter().map(|r| r.layer_index + 1).max().unwrap_or(0);
    let picked = source_layers
        .iter()
        .map(|&layer| {
            raw.iter()
                .find(|r| r.layer_index == layer)
                .ok_or(Error::InvalidLayer { layer, depth })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = picked.first() {
        for r in &picked[1..] {
            if r.values.shape() != first.values.shape() {
                return Err(Error::ShapeMismatch {
                    op: "build_bank",
                    left: first.values.shape().to_vec(),
                    right: r.values.shape().to_vec(),
                });
            }
        }
    }
    Ok(picked)
}

/// Records `F_i = proj_i(norm_i(R_i))` for every bank layer and stacks the
/// results into an `L x M x D` node.
pub fn build_bank_on(tape: &mut Tape, raw: &[RawLayerFeature], params: &FusionParams) -> Result<Var> {
    let projector = params
        .projector
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("variant {} has no feature bank", params.variant)))?;
    let sources = gather_sources(raw, &params.source_layers)?;
    let mut slices = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let x = tape.constant(src.values.clone())?;
        let normed = params.per_layer_norms[i].forward(tape, x, params.eps)?;
        slices.push(projector.for_layer(i).forward(tape, normed)?);
    }
    tape.stack_layers(&slices)
}

/// Builds the feature bank for one sequence.
pub fn build_bank(raw: &[RawLayerFeature], params: &FusionParams) -> Result<FeatureBank> {
    let mut tape = Tape::inference();
    let bank = build_bank_on(&mut tape, raw, params)?;
    FeatureBank::new(tape.value(bank).clone(), params.source_layers.clone())
}
