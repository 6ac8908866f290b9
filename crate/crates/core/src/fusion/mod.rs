//! Multi-layer feature fusion: a bank of normalized, projected encoder
//! layers, per-token top-k routing over that bank, weighted aggregation,
//! and injection back into the token stream. Baseline strategies (no
//! features, one static layer, mean over layers) and alternative
//! projection/injection designs share the same entry points.

mod bank;
mod inject;
mod params;
mod pipeline;
mod routing;

pub use bank::{build_bank, build_bank_on, select_layers, FeatureBank, RawLayerFeature};
pub use inject::{
    film_on, gated2d3d_on, gated2d_on, inject_film, inject_gated2d, inject_gated2d3d, inject_on,
    inject_residual, residual_on,
};
pub use params::{
    Aggregation, FusionConfig, FusionParams, Init, Injection, InjectionParams, LayerNormParams,
    Linear, Mlp, Projector, SelectionStrategy, Variant, DEFAULT_SINGLE_LAYER,
};
pub use pipeline::{aggregate_on, fuse, fuse_on, select_single, FuseOutput};
pub use routing::{
    aggregate, aggregate_mean, pooled_summary, route, route_on, routing_summary, SparseRoutingPlan,
};
