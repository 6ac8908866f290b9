use crate::error::{Error, Result};
use crate::fusion::{fuse_on, FusionConfig, FusionParams, Init, Linear, Mlp, RawLayerFeature, SparseRoutingPlan};
use crate::numerics::{Param, Parameterized, Tape, Var};

use super::scene::{SceneSpec, SyntheticBatch};

/// Residual block `h + mlp(h) + mean_l(h) W_ctx`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub mlp: Mlp,
    pub ctx: Param,
}

impl Block {
    fn new(init: &Init, name: &str, width: usize) -> Self {
        Self {
            mlp: Mlp::new(init, &format!("{name}.mlp"), width, width, width),
            ctx: init.normal(&format!("{name}.ctx"), &[width, width]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let local = self.mlp.forward(tape, h)?;
        let w = tape.param(&self.ctx)?;
        let mixed = tape.matmul(h, w)?;
        let ctx = tape.mean_tokens(mixed)?;
        let update = tape.add_bias(local, ctx)?;
        tape.add(h, update)
    }
}

/// Stand-in for the language model: residual blocks plus one linear readout
/// per task. Fusion output enters the stream after block `injection_index`
/// (0 means before the first block).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    pub blocks: Vec<Block>,
    pub heads: Linear,
    pub injection_index: usize,
}

impl ToyBackbone {
    pub fn new(init: &Init, width: usize, num_blocks: usize, num_tasks: usize, injection_index: usize) -> Result<Self> {
        if injection_index > num_blocks {
            return Err(Error::invalid(format!(
                "injection index {injection_index} outside 0..={num_blocks}"
            )));
        }
        Ok(Self {
            blocks: (0..num_blocks)
                .map(|b| Block::new(init, &format!("backbone.block{b}"), width))
                .collect(),
            heads: Linear::new(init, "backbone.heads", width, num_tasks),
            injection_index,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Per-token prediction from the head of each token's task.
    pub fn readout(&self, tape: &mut Tape, h: Var, tasks: &[usize]) -> Result<Var> {
        let all = self.heads.forward(tape, h)?;
        tape.gather_cols(all, tasks.to_vec())
    }
}

impl Parameterized for ToyBackbone {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.mlp.params());
            out.push(&b.ctx);
        }
        out.extend(self.heads.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.mlp.params_mut());
            out.push(&mut b.ctx);
        }
        out.extend(self.heads.params_mut());
        out
    }
}

/// Nodes of one forward pass through fusion and backbone.
#[derive(Debug)]
pub struct ForwardPass {
    pub predictions: Var,
    pub plan: Option<SparseRoutingPlan>,
}

/// Runs the backbone on query tokens `q`, calling fusion at the configured
/// position. At position `b > 0` the hidden state after block `b` is both
/// the routing query and the injection base.
pub fn backbone_forward(
    tape: &mut Tape,
    backbone: &ToyBackbone,
    fusion: Option<&FusionParams>,
    q: Var,
    raw: &[RawLayerFeature],
    tasks: &[usize],
) -> Result<ForwardPass> {
    let mut plan = None;
    let mut fuse_at = |tape: &mut Tape, h: Var| -> Result<Var> {
        match fusion {
            Some(params) => {
                let out = fuse_on(tape, h, raw, params)?;
                plan = out.plan;
                Ok(out.q_hat)
            }
            None => Ok(h),
        }
    };
    let mut h = q;
    if backbone.injection_index == 0 {
        h = fuse_at(tape, h)?;
    }
    for (b, block) in backbone.blocks.iter().enumerate() {
        h = block.forward(tape, h)?;
        if b + 1 == backbone.injection_index {
            h = fuse_at(tape, h)?;
        }
    }
    let predictions = backbone.readout(tape, h, tasks)?;
    Ok(ForwardPass { predictions, plan })
}

/// Structural settings of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub num_blocks: usize,
    pub injection_index: usize,
    pub num_tasks: usize,
}

impl ModelConfig {
    /// Fusion and backbone widths taken from `spec`; 4 blocks, injection
    /// before the backbone.
    pub fn for_scene(spec: &SceneSpec, fusion: FusionConfig) -> Self {
        Self {
            fusion: FusionConfig {
                total_depth: spec.total_depth,
                raw_width: spec.raw_width,
                width: spec.query_width,
                ..fusion
            },
            num_blocks: 4,
            injection_index: 0,
            num_tasks: spec.num_tasks,
        }
    }
}

/// Fusion module plus toy backbone, trained on per-token squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub fusion: FusionParams,
    pub backbone: ToyBackbone,
}

/// What one sequence yields at evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutput {
    pub predictions: Vec<f64>,
    pub plan: Option<SparseRoutingPlan>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let init = Init::new(seed);
        Ok(Self {
            fusion: FusionParams::new(&cfg.fusion, &init)?,
            backbone: ToyBackbone::new(
                &init,
                cfg.fusion.width,
                cfg.num_blocks,
                cfg.num_tasks,
                cfg.injection_index,
            )?,
        })
    }

    /// Records the forward pass and the mean squared error for one sequence.
    pub fn loss_on(&self, tape: &mut Tape, batch: &SyntheticBatch) -> Result<(Var, ForwardPass)> {
        let q = tape.constant(batch.queries.clone())?;
        let pass = backbone_forward(
            tape,
            &self.backbone,
            Some(&self.fusion),
            q,
            &batch.raw_layers,
            &batch.task_of_token,
        )?;
        let target = tape.constant(batch.targets.clone())?;
        let err = tape.sub(pass.predictions, target)?;
        let sq = tape.mul(err, err)?;
        let loss = tape.mean(sq)?;
        Ok((loss, pass))
    }

    /// Predictions and routing plan for one sequence.
    pub fn predict(&self, batch: &SyntheticBatch) -> Result<SequenceOutput> {
        let mut tape = Tape::inference();
        let (_, pass) = self.loss_on(&mut tape, batch)?;
        Ok(SequenceOutput {
            predictions: tape.value(pass.predictions).data().to_vec(),
            plan: pass.plan,
        })
    }
}

impl Parameterized for Model {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.fusion.params();
        out.extend(self.backbone.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.fusion.params_mut();
        out.extend(self.backbone.params_mut());
        out
    }
}
