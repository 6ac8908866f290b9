use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bank::select_layers;
use crate::error::{Error, Result};
use crate::numerics::{Array, Param, Parameterized, Tape, Var, LAYER_NORM_EPS};

/// Fusion strategy. `Dynamic` is sparse top-k routing with residual
/// injection; the rest are the baselines and design alternatives it is
/// compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Dynamic,
    /// Static injection of one encoder layer (global index).
    Single(usize),
    Mean,
    TwoDOnly,
    SplitProj,
    Film,
    Gated2D,
    Gated2D3D,
}

/// Default static layer for `Single` on a 24-deep encoder.
pub const DEFAULT_SINGLE_LAYER: usize = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    None,
    Single,
    Mean,
    Routed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    Residual,
    Film,
    Gated2D,
    Gated2D3D,
}

impl Variant {
    pub fn aggregation(self) -> Aggregation {
        match self {
            Variant::TwoDOnly => Aggregation::None,
            Variant::Single(_) => Aggregation::Single,
            Variant::Mean => Aggregation::Mean,
            _ => Aggregation::Routed,
        }
    }

    pub fn injection(self) -> Injection {
        match self {
            Variant::Film => Injection::Film,
            Variant::Gated2D => Injection::Gated2D,
            Variant::Gated2D3D => Injection::Gated2D3D,
            _ => Injection::Residual,
        }
    }

    pub fn is_routed(self) -> bool {
        self.aggregation() == Aggregation::Routed
    }

    /// Row label used in results tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Dynamic => "Dynamic",
            Variant::Single(_) => "Single",
            Variant::Mean => "Mean",
            Variant::TwoDOnly => "TwoDOnly",
            Variant::SplitProj => "SplitProj",
            Variant::Film => "FiLM",
            Variant::Gated2D => "Gated2D",
            Variant::Gated2D3D => "Gated2D3D",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Single(j) => write!(f, "Single({j})"),
            v => f.write_str(v.label()),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the table labels case-insensitively, plus `Single(j)`.
    /// A bare `Single` means layer [`DEFAULT_SINGLE_LAYER`].
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(inner) = lower.strip_prefix("single(").and_then(|r| r.strip_suffix(')')) {
            return inner
                .trim()
                .parse()
                .map(Variant::Single)
                .map_err(|_| Error::invalid(format!("bad layer index in variant `{s}`")));
        }
        Ok(match lower.as_str() {
            "dynamic" => Variant::Dynamic,
            "single" => Variant::Single(DEFAULT_SINGLE_LAYER),
            "mean" => Variant::Mean,
            "twodonly" | "2d-only" | "2donly" => Variant::TwoDOnly,
            "splitproj" | "split-proj" => Variant::SplitProj,
            "film" => Variant::Film,
            "gated2d" => Variant::Gated2D,
            "gated2d3d" => Variant::Gated2D3D,
            _ => return Err(Error::invalid(format!("unknown variant `{s}`"))),
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// Which encoder layers populate the feature bank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    LatterHalf,
    FormerHalf,
    Uniform,
}

/// Deterministic parameter initializer. Each parameter draws from its own
/// stream keyed by `(seed, name)`, so two models sharing a parameter name
/// start from the same values.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed, std: 0.02 }
    }

    pub fn normal(&self, name: &str, shape: &[usize]) -> Param {
        let key = crate::checksum::crc64(name.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key);
        let dist = Normal::new(0.0, self.std).expect("std is finite and positive");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Param::new(name, Array::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn zeros(&self, name: &str, shape: &[usize]) -> Param {
        Param::new(name, Array::zeros(shape))
    }

    pub fn ones(&self, name: &str, shape: &[usize]) -> Param {
        Param::new(name, Array::full(shape, 1.0))
    }
}

/// `x -> x W + b` applied to each row; `weight` is `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &Init, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: init.normal(&format!("{name}.weight"), &[input, output]),
            bias: Some(init.zeros(&format!("{name}.bias"), &[output])),
        }
    }

    /// `x -> x W`.
    pub fn without_bias(init: &Init, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: init.normal(&format!("{name}.weight"), &[input, output]),
            bias: None,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(bias) => {
                let b = tape.param(bias)?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &Init, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), input, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, output),
        }
    }

    /// Same shape with no bias terms.
    pub fn without_bias(init: &Init, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::without_bias(init, &format!("{name}.fc1"), input, hidden),
            fc2: Linear::without_bias(init, &format!("{name}.fc2"), hidden, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }

    pub fn output_width(&self) -> usize {
        self.fc2.output_width()
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        self.fc1.params().into_iter().chain(self.fc2.params()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        self.fc1.params_mut().into_iter().chain(self.fc2.params_mut()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNormParams {
    pub fn new(init: &Init, name: &str, width: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), &[width]),
            beta: init.zeros(&format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(&self.gamma)?;
        let b = tape.param(&self.beta)?;
        tape.layer_norm(x, g, b, eps)
    }
}

/// Projection from the raw encoder width into the query width.
#[derive(Clone, Debug, PartialEq)]
pub enum Projector {
    Shared(Mlp),
    /// One independent perceptron per bank layer.
    Split(Vec<Mlp>),
}

impl Projector {
    pub fn for_layer(&self, i: usize) -> &Mlp {
        match self {
            Projector::Shared(m) => m,
            Projector::Split(ms) => &ms[i],
        }
    }
}

/// Injection weights; which ones are present depends on the variant.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InjectionParams {
    pub w_out: Option<Param>,
    pub w_scale: Option<Param>,
    pub w_shift: Option<Param>,
    pub w_gate: Option<Param>,
}

/// Structural settings of a fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub variant: Variant,
    pub total_depth: usize,
    pub m: usize,
    pub k: usize,
    pub selection: SelectionStrategy,
    pub raw_width: usize,
    pub width: usize,
    pub proj_hidden: Option<usize>,
    pub router_hidden: Option<usize>,
}

impl FusionConfig {
    pub fn new(variant: Variant, raw_width: usize, width: usize) -> Self {
        Self {
            variant,
            total_depth: 24,
            m: 12,
            k: 2,
            selection: SelectionStrategy::LatterHalf,
            raw_width,
            width,
            proj_hidden: None,
            router_hidden: None,
        }
    }
}

/// All learnable state of the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub variant: Variant,
    pub k: usize,
    pub selection_strategy: SelectionStrategy,
    /// Global encoder layer index of each bank slot, strictly increasing.
    pub source_layers: Vec<usize>,
    pub per_layer_norms: Vec<LayerNormParams>,
    pub projector: Option<Projector>,
    pub router: Option<Mlp>,
    pub injection: InjectionParams,
    pub eps: f64,
}

impl FusionParams {
    pub fn new(cfg: &FusionConfig, init: &Init) -> Result<Self> {
        let (d_raw, d) = (cfg.raw_width, cfg.width);
        if d_raw == 0 || d == 0 {
            return Err(Error::invalid("fusion widths must be positive"));
        }
        if cfg.k == 0 || cfg.k > cfg.m {
            return Err(Error::invalid(format!(
                "sparsity k = {} must lie in 1..={} (m)",
                cfg.k, cfg.m
            )));
        }
        let source_layers = match cfg.variant {
            Variant::TwoDOnly => Vec::new(),
            Variant::Single(j) => {
                if j >= cfg.total_depth {
                    return Err(Error::InvalidLayer {
                        layer: j,
                        depth: cfg.total_depth,
                    });
                }
                vec![j]
            }
            _ => select_layers(cfg.total_depth, cfg.m, cfg.selection)?,
        };
        let m = source_layers.len();
        let k = match cfg.variant.aggregation() {
            Aggregation::None => 0,
            Aggregation::Single => 1,
            Aggregation::Mean => m,
            Aggregation::Routed => cfg.k,
        };

        let per_layer_norms = source_layers
            .iter()
            .map(|l| LayerNormParams::new(init, &format!("fusion.norm.l{l}"), d_raw))
            .collect();
        let proj_hidden = cfg.proj_hidden.unwrap_or(d);
        let projector = match cfg.variant {
            Variant::TwoDOnly => None,
            Variant::SplitProj => Some(Projector::Split(
                source_layers
                    .iter()
                    .map(|l| Mlp::new(init, &format!("fusion.proj.l{l}"), d_raw, proj_hidden, d))
                    .collect(),
            )),
            _ => Some(Projector::Shared(Mlp::new(
                init,
                "fusion.proj",
                d_raw,
                proj_hidden,
                d,
            ))),
        };
        let router = cfg.variant.is_routed().then(|| {
            let hidden = cfg.router_hidden.unwrap_or_else(|| (d / 2).max(16));
            Mlp::without_bias(init, "fusion.router", d, hidden, m)
        });
        let injection = match (cfg.variant.aggregation(), cfg.variant.injection()) {
            (Aggregation::None, _) => InjectionParams::default(),
            (_, Injection::Residual) => InjectionParams {
                w_out: Some(init.zeros("fusion.w_out", &[d, d])),
                ..Default::default()
            },
            (_, Injection::Film) => InjectionParams {
                w_scale: Some(init.zeros("fusion.w_scale", &[d, d])),
                w_shift: Some(init.zeros("fusion.w_shift", &[d, d])),
                ..Default::default()
            },
            (_, Injection::Gated2D) => InjectionParams {
                w_out: Some(init.zeros("fusion.w_out", &[d, d])),
                w_gate: Some(init.normal("fusion.w_gate", &[d, d])),
                ..Default::default()
            },
            (_, Injection::Gated2D3D) => InjectionParams {
                w_out: Some(init.zeros("fusion.w_out", &[d, d])),
                w_gate: Some(init.normal("fusion.w_gate", &[2 * d, d])),
                ..Default::default()
            },
        };
        Ok(Self {
            variant: cfg.variant,
            k,
            selection_strategy: cfg.selection,
            source_layers,
            per_layer_norms,
            projector,
            router,
            injection,
            eps: LAYER_NORM_EPS,
        })
    }

    /// Number of bank layers `M`.
    pub fn m(&self) -> usize {
        self.source_layers.len()
    }
}

impl Parameterized for FusionParams {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for n in &self.per_layer_norms {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        match &self.projector {
            Some(Projector::Shared(m)) => out.extend(m.params()),
            Some(Projector::Split(ms)) => ms.iter().for_each(|m| out.extend(m.params())),
            None => {}
        }
        if let Some(r) = &self.router {
            out.extend(r.params());
        }
        let inj = &self.injection;
        out.extend(
            [&inj.w_out, &inj.w_scale, &inj.w_shift, &inj.w_gate]
                .into_iter()
                .flatten(),
        );
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for n in &mut self.per_layer_norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        match &mut self.projector {
            Some(Projector::Shared(m)) => out.extend(m.params_mut()),
            Some(Projector::Split(ms)) => ms.iter_mut().for_each(|m| out.extend(m.params_mut())),
            None => {}
        }
        if let Some(r) = &mut self.router {
            out.extend(r.params_mut());
        }
        let inj = &mut self.injection;
        out.extend(
            [
                &mut inj.w_out,
                &mut inj.w_scale,
                &mut inj.w_shift,
                &mut inj.w_gate,
            ]
            .into_iter()
            .flatten(),
        );
        out
    }
}
