//! The gradient suites run by `georoute gradcheck`: every tape kernel on
//! random inputs, then whole fusion pipelines and the toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{fuse_on, FusionConfig, FusionParams, Init, RawLayerFeature, Variant};
use crate::numerics::{finite_diff_check, finite_diff_check_model, Array, GradCheckReport, Parameterized, Tape, Var};
use crate::synthbench::{Model, ModelConfig, SceneGenerator, SceneSpec};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}

/// `sum(y * c)` for a fixed random `c`, so every output entry gets its own
/// upstream gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let c = tape.constant(uniform(&mut rng, &shape, 1.0))?;
    let prod = tape.mul(y, c)?;
    tape.sum(prod)
}

type KernelFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn kernel_cases() -> Vec<(&'static str, Vec<Vec<usize>>, KernelFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| t.add_bias(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], -1.5)),
        ("add_scalar", vec![vec![3, 4]], |t, v| t.add_scalar(v[0], 0.7)),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| t.concat_cols(v[0], v[1])),
        ("sigmoid", vec![vec![3, 4]], |t, v| t.sigmoid(v[0])),
        ("gelu", vec![vec![3, 4]], |t, v| t.gelu(v[0])),
        ("row_mean", vec![vec![3, 5]], |t, v| t.row_mean(v[0])),
        ("row_var", vec![vec![3, 5]], |t, v| t.row_var(v[0])),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], crate::numerics::LAYER_NORM_EPS)
        }),
        ("masked_softmax_topk", vec![vec![4, 6]], |t, v| {
            let sel = t.topk_rows(v[0], 2)?;
            t.masked_softmax(v[0], sel)
        }),
        ("masked_softmax_dense", vec![vec![4, 6]], |t, v| {
            let sel = t.topk_rows(v[0], 6)?;
            t.masked_softmax(v[0], sel)
        }),
        ("stack_layers", vec![vec![3, 4], vec![3, 4], vec![3, 4]], |t, v| t.stack_layers(v)),
        ("weighted_layer_sum", vec![vec![3, 2], vec![3, 4], vec![3, 4]], |t, v| {
            let bank = t.stack_layers(&v[1..])?;
            t.weighted_layer_sum(v[0], bank)
        }),
        ("mean_layers", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let bank = t.stack_layers(v)?;
            t.mean_layers(bank)
        }),
        ("mean_tokens", vec![vec![3, 4]], |t, v| t.mean_tokens(v[0])),
        ("gather_cols", vec![vec![4, 3]], |t, v| t.gather_cols(v[0], vec![2, 0, 1, 2])),
        ("sum", vec![vec![3, 4]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
    ]
}

/// One report per kernel, inputs uniform in `[-2, 2]`.
pub fn kernel_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kernel_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let names: Vec<String> = (0..shapes.len()).map(|j| format!("{name}.in{j}")).collect();
            let inputs: Vec<(&str, Array)> = names
                .iter()
                .zip(&shapes)
                .map(|(n, s)| (n.as_str(), uniform(&mut rng, s, 2.0)))
                .collect();
            let proj_seed = seed ^ (i as u64 + 1);
            finite_diff_check(name, &inputs, STEP, TOLERANCE, move |t, v| {
                let y = f(t, v)?;
                project(t, y, proj_seed)
            })
        })
        .collect()
}

/// Replaces every parameter with uniform noise of scale `bound`, so no
/// gradient is trivially zero (fresh parameters start with zero `w_out`).
fn randomize<P: Parameterized>(p: &mut P, rng: &mut ChaCha8Rng, bound: f64) {
    for param in p.params_mut() {
        let shape = param.value.shape().to_vec();
        param.value = uniform(rng, &shape, bound);
    }
}

/// Small fusion module (`L = 3, D = 8, D' = 6, M = 4`) with randomized
/// parameters and inputs.
struct FusionCase {
    params: FusionParams,
    q: Array,
    raw: Vec<RawLayerFeature>,
}

fn fusion_case(variant: Variant, seed: u64) -> Result<FusionCase> {
    let (l, d, d_raw, m) = (3, 8, 6, 4);
    let cfg = FusionConfig {
        total_depth: m,
        m,
        k: 2,
        ..FusionConfig::new(variant, d_raw, d)
    };
    let mut params = FusionParams::new(&cfg, &Init::new(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize(&mut params, &mut rng, 0.5);
    let q = uniform(&mut rng, &[l, d], 2.0);
    let raw = (0..m)
        .map(|i| RawLayerFeature {
            layer_index: i,
            values: uniform(&mut rng, &[l, d_raw], 2.0),
        })
        .collect();
    Ok(FusionCase { params, q, raw })
}

/// Checks `sum(fuse(q, raw) * c)` against all fusion parameters. Seeds are
/// tried in order until the routing logits clear the tie margin.
pub fn fusion_check(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let mut last = None;
    for attempt in 0..16 {
        let mut case = fusion_case(variant, seed.wrapping_add(attempt))?;
        let (q, raw) = (case.q.clone(), case.raw.clone());
        let name = format!("fuse[{variant}]");
        let result = finite_diff_check_model(&name, &mut case.params, STEP, TOLERANCE, |tape, p| {
            let qv = tape.constant(q.clone())?;
            let out = fuse_on(tape, qv, &raw, p)?;
            project(tape, out.q_hat, seed)
        });
        match result {
            Err(crate::Error::TieMargin { .. }) => last = Some(result),
            other => return other,
        }
    }
    last.expect("at least one attempt")
}

/// Checks the mean squared error of the toy model (fusion plus backbone) on
/// a small synthetic scene.
pub fn model_check(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let spec = SceneSpec {
        total_depth: 6,
        num_tokens: 4,
        raw_width: 5,
        query_width: 6,
        num_tasks: 2,
        planted_layers: vec![3, 5],
        seed,
        ..SceneSpec::default()
    };
    let batch = SceneGenerator::new(spec.clone())?.sequence(0);
    let fusion = FusionConfig {
        m: 4,
        k: 2,
        proj_hidden: Some(6),
        router_hidden: Some(4),
        ..FusionConfig::new(variant, spec.raw_width, spec.query_width)
    };
    let cfg = ModelConfig {
        num_blocks: 2,
        injection_index: 1,
        ..ModelConfig::for_scene(&spec, fusion)
    };
    let mut last = None;
    for attempt in 0..16 {
        let mut model = Model::new(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        randomize(&mut model, &mut rng, 0.5);
        let result = finite_diff_check_model(&format!("model[{variant}]"), &mut model, STEP, TOLERANCE, |tape, m| {
            Ok(m.loss_on(tape, &batch)?.0)
        });
        match result {
            Err(crate::Error::TieMargin { .. }) => last = Some(result),
            other => return other,
        }
    }
    last.expect("at least one attempt")
}

/// Every kernel, the fusion pipeline for each injection and projector
/// variant, and the routed toy model.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = kernel_suite(seed)?;
    for variant in [
        Variant::Dynamic,
        Variant::Mean,
        Variant::Single(2),
        Variant::SplitProj,
        Variant::Film,
        Variant::Gated2D,
        Variant::Gated2D3D,
    ] {
        reports.push(fusion_check(variant, seed)?);
    }
    reports.push(model_check(Variant::Dynamic, seed)?);
    Ok(reports)
}
