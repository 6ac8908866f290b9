use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, SelectionStrategy, Variant};
use crate::synthbench::{ModelConfig, SceneSpec};
use crate::trainer::{AdamWConfig, ScheduleSpec, TrainConfig};

/// Every knob of one experiment as a flat JSON object. Missing keys take
/// the defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    // Scene.
    pub total_depth: usize,
    pub num_tokens: usize,
    pub raw_width: usize,
    pub query_width: usize,
    pub num_tasks: usize,
    pub planted_layers: Vec<usize>,
    pub attenuation_tau: f64,
    pub noise_sigma: f64,
    pub query_noise: f64,

    // Fusion and backbone.
    pub variant: Variant,
    pub m: usize,
    pub k: usize,
    pub selection_strategy: SelectionStrategy,
    pub proj_hidden: Option<usize>,
    pub router_hidden: Option<usize>,
    pub num_blocks: usize,
    pub injection_index: usize,

    // Schedule.
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub lr_peak: f64,
    pub lr_end: f64,

    // Training.
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: Option<f64>,
    pub frozen: Vec<String>,

    // Evaluation and ablation.
    pub eval_batches: usize,
    pub ablation_variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let adam = AdamWConfig::default();
        Self {
            seed: 0,
            total_depth: scene.total_depth,
            num_tokens: scene.num_tokens,
            raw_width: scene.raw_width,
            query_width: scene.query_width,
            num_tasks: scene.num_tasks,
            planted_layers: scene.planted_layers,
            attenuation_tau: scene.attenuation_tau,
            noise_sigma: scene.noise_sigma,
            query_noise: scene.query_noise,
            variant: Variant::Dynamic,
            m: 12,
            k: 2,
            selection_strategy: SelectionStrategy::LatterHalf,
            proj_hidden: None,
            router_hidden: None,
            num_blocks: 4,
            injection_index: 0,
            total_steps: 500,
            warmup_fraction: 0.03,
            lr_peak: 3e-3,
            lr_end: 0.0,
            batch_size: 32,
            epochs: 1,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            clip_norm: None,
            frozen: Vec::new(),
            eval_batches: 2,
            ablation_variants: vec![
                Variant::TwoDOnly,
                Variant::Single(crate::fusion::DEFAULT_SINGLE_LAYER),
                Variant::Mean,
                Variant::Dynamic,
            ],
        }
    }
}

fn check(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message()))
    }
}

impl ExperimentConfig {
    /// Structural checks; each failure names the offending key.
    pub fn validate(&self) -> Result<()> {
        check(self.total_depth > 0, "total_depth", || "must be positive".into())?;
        check(self.num_tokens > 0, "num_tokens", || "must be positive".into())?;
        check(self.raw_width >= 3, "raw_width", || "must be at least 3".into())?;
        check(self.num_tasks > 0, "num_tasks", || "must be positive".into())?;
        check(self.num_tasks <= self.query_width, "num_tasks", || {
            format!("{} tasks exceed query_width {}", self.num_tasks, self.query_width)
        })?;
        check(self.planted_layers.len() == self.num_tasks, "planted_layers", || {
            format!("{} entries for {} tasks", self.planted_layers.len(), self.num_tasks)
        })?;
        check(
            self.planted_layers.iter().all(|&p| p < self.total_depth),
            "planted_layers",
            || format!("every layer must be below total_depth {}", self.total_depth),
        )?;
        check(self.attenuation_tau > 0.0 && self.attenuation_tau.is_finite(), "attenuation_tau", || {
            "must be positive".into()
        })?;
        check(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(), "noise_sigma", || {
            "must be nonnegative".into()
        })?;
        check(self.query_noise >= 0.0 && self.query_noise.is_finite(), "query_noise", || {
            "must be nonnegative".into()
        })?;
        check(self.m > 0, "m", || "must be positive".into())?;
        check(self.m <= self.total_depth, "m", || {
            format!("m = {} exceeds total_depth {}", self.m, self.total_depth)
        })?;
        check(self.k > 0, "k", || "must be positive".into())?;
        check(self.k <= self.m, "k", || format!("k = {} exceeds m = {}", self.k, self.m))?;
        for (key, v) in [("variant", self.variant)]
            .into_iter()
            .chain(self.ablation_variants.iter().map(|&v| ("ablation_variants", v)))
        {
            if let Variant::Single(j) = v {
                check(j < self.total_depth, key, || {
                    format!("Single({j}) is outside an encoder of depth {}", self.total_depth)
                })?;
            }
        }
        check(self.injection_index <= self.num_blocks, "injection_index", || {
            format!("{} exceeds num_blocks {}", self.injection_index, self.num_blocks)
        })?;
        check((0.0..1.0).contains(&self.warmup_fraction), "warmup_fraction", || {
            "must lie in [0, 1)".into()
        })?;
        check(self.lr_peak >= 0.0 && self.lr_peak.is_finite(), "lr_peak", || {
            "must be finite and nonnegative".into()
        })?;
        check(self.lr_end >= 0.0 && self.lr_end.is_finite(), "lr_end", || {
            "must be finite and nonnegative".into()
        })?;
        check(self.batch_size > 0, "batch_size", || "must be positive".into())?;
        check(self.epochs > 0, "epochs", || "must be positive".into())?;
        check(self.eval_batches > 0, "eval_batches", || "must be positive".into())?;
        check((0.0..1.0).contains(&self.beta1), "beta1", || "must lie in [0, 1)".into())?;
        check((0.0..1.0).contains(&self.beta2), "beta2", || "must lie in [0, 1)".into())?;
        check(self.adam_eps > 0.0, "adam_eps", || "must be positive".into())?;
        check(self.weight_decay >= 0.0, "weight_decay", || "must be nonnegative".into())?;
        if let Some(c) = self.clip_norm {
            check(c > 0.0, "clip_norm", || "must be positive".into())?;
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            total_depth: self.total_depth,
            num_tokens: self.num_tokens,
            raw_width: self.raw_width,
            query_width: self.query_width,
            num_tasks: self.num_tasks,
            planted_layers: self.planted_layers.clone(),
            attenuation_tau: self.attenuation_tau,
            noise_sigma: self.noise_sigma,
            query_noise: self.query_noise,
            seed: self.seed,
        }
    }

    /// Model structure for `variant` (the ablation grid reuses everything
    /// but the variant).
    pub fn model(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            fusion: FusionConfig {
                variant,
                total_depth: self.total_depth,
                m: self.m,
                k: self.k,
                selection: self.selection_strategy,
                raw_width: self.raw_width,
                width: self.query_width,
                proj_hidden: self.proj_hidden,
                router_hidden: self.router_hidden,
            },
            num_blocks: self.num_blocks,
            injection_index: self.injection_index,
            num_tasks: self.num_tasks,
        }
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            total_steps: self.total_steps,
            warmup_fraction: self.warmup_fraction,
            lr_peak: self.lr_peak,
            lr_end: self.lr_end,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            frozen: self.frozen.clone(),
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            clip_norm: self.clip_norm,
        }
    }

    /// Pretty JSON with keys in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a JSON document. Type errors and unknown keys name
/// the key path.
pub fn load_config(document: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        // Unknown fields are reported at the parent path; pull the name out.
        let key = if message.starts_with("unknown field") {
            message
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or(key)
        } else {
            key
        };
        Error::config(key, message)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_config(&text)
}
