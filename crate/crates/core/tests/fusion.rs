use georoute::fusion::{
    aggregate, aggregate_mean, build_bank, fuse, fuse_on, inject_film, inject_gated2d, inject_gated2d3d,
    inject_residual, route, routing_summary, select_layers, select_single, FeatureBank, FusionConfig,
    FusionParams, Init, Projector, RawLayerFeature, SelectionStrategy, SparseRoutingPlan, Variant,
    DEFAULT_SINGLE_LAYER,
};
use georoute::gradsuite::fusion_check;
use georoute::numerics::{masked_softmax_rows, topk_indices, Array, Parameterized, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L: usize = 3;
const D: usize = 8;
const D_RAW: usize = 6;
const M: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn config(variant: Variant) -> FusionConfig {
    FusionConfig {
        total_depth: M,
        m: M,
        k: 2,
        ..FusionConfig::new(variant, D_RAW, D)
    }
}

/// Fresh parameters with every array replaced by uniform noise.
fn random_params(variant: Variant, seed: u64) -> FusionParams {
    let mut p = FusionParams::new(&config(variant), &Init::new(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for param in p.params_mut() {
        let shape = param.value.shape().to_vec();
        param.value = uniform(&mut rng, &shape, 0.5);
    }
    p
}

fn inputs(seed: u64, tokens: usize, depth: usize) -> (Array, Vec<RawLayerFeature>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let q = uniform(&mut rng, &[tokens, D], 2.0);
    let raw = (0..depth)
        .map(|i| RawLayerFeature {
            layer_index: i,
            values: uniform(&mut rng, &[tokens, D_RAW], 2.0),
        })
        .collect();
    (q, raw)
}

fn set(param: &mut Option<georoute::numerics::Param>, value: Array) {
    param.as_mut().unwrap().value = value;
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Router weights so that `logits = q a` exactly: `gelu(x) - gelu(-x) = x`.
fn linear_router(p: &mut FusionParams, a: &Array) {
    let (d, m) = a.dims2().unwrap();
    let r = p.router.as_mut().unwrap();
    let mut w1 = vec![0.0; d * 2 * m];
    for i in 0..d {
        for j in 0..m {
            w1[i * 2 * m + j] = a.get2(i, j);
            w1[i * 2 * m + m + j] = -a.get2(i, j);
        }
    }
    let mut w2 = vec![0.0; 2 * m * m];
    for j in 0..m {
        w2[j * m + j] = 1.0;
        w2[(m + j) * m + j] = -1.0;
    }
    r.fc1.weight.value = Array::matrix(d, 2 * m, w1).unwrap();
    r.fc2.weight.value = Array::matrix(2 * m, m, w2).unwrap();
}

#[test]
fn layer_selection_strategies() {
    assert_eq!(select_layers(24, 12, SelectionStrategy::LatterHalf).unwrap(), (12..24).collect::<Vec<_>>());
    assert_eq!(select_layers(24, 12, SelectionStrategy::FormerHalf).unwrap(), (0..12).collect::<Vec<_>>());
    assert_eq!(
        select_layers(24, 12, SelectionStrategy::Uniform).unwrap(),
        (0..12).map(|i| 2 * i).collect::<Vec<_>>()
    );
    assert!(select_layers(24, 25, SelectionStrategy::LatterHalf).is_err());
    let u = select_layers(24, 7, SelectionStrategy::Uniform).unwrap();
    assert!(u.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn identity_projection_bank_is_normalized_raw() {
    let mut cfg = FusionConfig::new(Variant::Mean, D_RAW, D_RAW);
    cfg.total_depth = 1;
    cfg.m = 1;
    cfg.k = 1;
    cfg.proj_hidden = Some(2 * D_RAW);
    let mut p = FusionParams::new(&cfg, &Init::new(0)).unwrap();
    let Some(Projector::Shared(mlp)) = p.projector.as_mut() else {
        panic!("shared projector expected")
    };
    let (mut w1, mut w2) = (vec![0.0; D_RAW * 2 * D_RAW], vec![0.0; 2 * D_RAW * D_RAW]);
    for i in 0..D_RAW {
        w1[i * 2 * D_RAW + i] = 1.0;
        w1[i * 2 * D_RAW + D_RAW + i] = -1.0;
        w2[i * D_RAW + i] = 1.0;
        w2[(D_RAW + i) * D_RAW + i] = -1.0;
    }
    mlp.fc1.weight.value = Array::matrix(D_RAW, 2 * D_RAW, w1).unwrap();
    mlp.fc2.weight.value = Array::matrix(2 * D_RAW, D_RAW, w2).unwrap();
    let (_, raw) = inputs(1, L, 1);
    let bank = build_bank(&raw, &p).unwrap();
    let normed = georoute::numerics::layer_norm(
        &raw[0].values,
        &Array::full(&[D_RAW], 1.0),
        &Array::zeros(&[D_RAW]),
        p.eps,
    )
    .unwrap();
    assert!(bank.slice(0).max_abs_diff(&normed) < 1e-12);
}

#[test]
fn equal_raw_layers_give_equal_slices() {
    let p = FusionParams::new(&config(Variant::Mean), &Init::new(4)).unwrap();
    let (_, mut raw) = inputs(2, L, M);
    raw[2].values = raw[1].values.clone();
    let bank = build_bank(&raw, &p).unwrap();
    assert!(bank.slice(1).bitwise_eq(&bank.slice(2)));
}

#[test]
fn bank_slice_depends_only_on_its_layer() {
    let p = random_params(Variant::Dynamic, 3);
    let (_, raw) = inputs(3, L, M);
    let base = build_bank(&raw, &p).unwrap();
    let mut perturbed = raw.clone();
    perturbed[1].values = perturbed[1].values.map(|v| v * 3.0 - 1.0);
    let bank = build_bank(&perturbed, &p).unwrap();
    for i in [0, 2, 3] {
        assert!(bank.slice(i).bitwise_eq(&base.slice(i)));
    }
    assert!(!bank.slice(1).bitwise_eq(&base.slice(1)));
}

#[test]
fn mismatched_raw_shapes_rejected() {
    let p = FusionParams::new(&config(Variant::Mean), &Init::new(0)).unwrap();
    let (_, mut raw) = inputs(0, L, M);
    raw[2].values = Array::zeros(&[L + 1, D_RAW]);
    assert!(build_bank(&raw, &p).is_err());
}

#[test]
fn raw_token_count_must_match_queries() {
    let p = random_params(Variant::Dynamic, 0);
    let (q, _) = inputs(0, L, M);
    let (_, raw) = inputs(0, L + 2, M);
    assert!(fuse(&q, &raw, &p).is_err());
}

#[test]
fn zero_router_shares_one_selection() {
    let p = FusionParams::new(&config(Variant::Dynamic), &Init::new(0)).unwrap();
    let mut p = p;
    for w in p.router.as_mut().unwrap().fc1.weight.value.data_mut() {
        *w = 0.0;
    }
    let (q, _) = inputs(5, L, M);
    let plan = route(&q, &p).unwrap();
    assert!(plan.logits.data().iter().all(|&v| v == 0.0));
    assert!(plan.selected.iter().all(|s| s == &plan.selected[0]));
    assert_eq!(plan.selected[0], vec![0, 1]);
}

#[test]
fn full_k_routing_is_dense_softmax() {
    let mut p = random_params(Variant::Dynamic, 6);
    p.k = M;
    let (q, _) = inputs(6, L, M);
    let plan = route(&q, &p).unwrap();
    for l in 0..L {
        let dense = softmax(plan.logits.row(l));
        for (a, b) in plan.weights.row(l).iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn route_hand_logits() {
    let mut p = FusionParams::new(&config(Variant::Dynamic), &Init::new(0)).unwrap();
    let mut a = Array::zeros(&[D, M]);
    a.data_mut()[..M].copy_from_slice(&[2.0, 1.0, 0.0, -1.0]);
    linear_router(&mut p, &a);
    let mut q = Array::zeros(&[1, D]);
    q.data_mut()[0] = 1.0;
    let plan = route(&q, &p).unwrap();
    for (x, y) in plan.logits.data().iter().zip([2.0, 1.0, 0.0, -1.0]) {
        assert!((x - y).abs() < 1e-15);
    }
    let w = plan.weights.data();
    assert!((w[0] - 0.731059).abs() < 1e-6 && (w[1] - 0.268941).abs() < 1e-6);
    assert_eq!(&w[2..], &[0.0, 0.0]);
}

fn bank_of(slices: &[Vec<Vec<f64>>]) -> FeatureBank {
    // slices[i][l] is the D-vector of slot i for token l.
    let (m, l, d) = (slices.len(), slices[0].len(), slices[0][0].len());
    let mut data = Vec::with_capacity(l * m * d);
    for t in 0..l {
        for s in slices {
            data.extend_from_slice(&s[t]);
        }
    }
    FeatureBank::new(Array::new(vec![l, m, d], data).unwrap(), (0..m).collect()).unwrap()
}

#[test]
fn aggregate_examples() {
    let bank = bank_of(&[vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
    let plan = SparseRoutingPlan {
        logits: Array::zeros(&[1, 2]),
        selected: vec![vec![0, 1]],
        weights: Array::matrix(1, 2, vec![0.25, 0.75]).unwrap(),
    };
    assert_eq!(aggregate(&bank, &plan).unwrap().data(), &[0.25, 0.75]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e = uniform(&mut rng, &[L, M, D], 2.0);
    let bank = FeatureBank::new(e.clone(), (0..M).collect()).unwrap();
    let plan = SparseRoutingPlan::one_hot(&[2, 0, 3], M);
    let f = aggregate(&bank, &plan).unwrap();
    for (l, slot) in [2, 0, 3].into_iter().enumerate() {
        assert_eq!(f.row(l), bank.entry(l, slot));
    }
    let doubled = FeatureBank::new(e.map(|v| 2.0 * v), (0..M).collect()).unwrap();
    let weights = masked_softmax_rows(&uniform(&mut rng, &[L, M], 1.0), &vec![vec![0, 1, 3]; L]).unwrap();
    let plan = SparseRoutingPlan {
        logits: Array::zeros(&[L, M]),
        selected: vec![vec![0, 1, 3]; L],
        weights,
    };
    let (f1, f2) = (aggregate(&bank, &plan).unwrap(), aggregate(&doubled, &plan).unwrap());
    assert!(f2.max_abs_diff(&f1.map(|v| 2.0 * v)) < 1e-12);
    let wrong = SparseRoutingPlan::uniform(L + 1, M);
    assert!(aggregate(&bank, &wrong).is_err());
}

#[test]
fn aggregate_mean_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let bank = FeatureBank::new(uniform(&mut rng, &[L, M, D], 2.0), (0..M).collect()).unwrap();
    let uniform_plan = SparseRoutingPlan::uniform(L, M);
    assert!(aggregate_mean(&bank).unwrap().max_abs_diff(&aggregate(&bank, &uniform_plan).unwrap()) < 1e-12);

    let single = FeatureBank::new(uniform(&mut rng, &[L, 1, D], 2.0), vec![5]).unwrap();
    assert_eq!(aggregate_mean(&single).unwrap(), single.slice(0));

    let x: Vec<Vec<f64>> = (0..L).map(|_| (0..D).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let neg: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let bank = bank_of(&[x, neg]);
    assert!(aggregate_mean(&bank).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_is_dynamic_over_one_layer() {
    let j = 2;
    let mut single = FusionParams::new(&config(Variant::Single(j)), &Init::new(7)).unwrap();
    let dyn_cfg = FusionConfig {
        total_depth: j + 1,
        m: 1,
        k: 1,
        ..config(Variant::Dynamic)
    };
    let mut dynamic = FusionParams::new(&dyn_cfg, &Init::new(7)).unwrap();
    assert_eq!(dynamic.source_layers, vec![j]);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let w_out = uniform(&mut rng, &[D, D], 0.5);
    set(&mut single.injection.w_out, w_out.clone());
    set(&mut dynamic.injection.w_out, w_out);
    let (q, raw) = inputs(7, L, M);
    let (a, plan_a) = fuse(&q, &raw, &single).unwrap();
    let (b, plan_b) = fuse(&q, &raw, &dynamic).unwrap();
    assert!(plan_a.is_none());
    assert!(plan_b.unwrap().weights.data().iter().all(|&w| w == 1.0));
    assert!(a.max_abs_diff(&b) < 1e-12);
    assert!(select_single(&raw, &single)
        .unwrap()
        .max_abs_diff(&build_bank(&raw, &dynamic).unwrap().slice(0))
        < 1e-12);
}

#[test]
fn single_defaults_and_data_flow() {
    assert_eq!(DEFAULT_SINGLE_LAYER, 22);
    assert_eq!("Single".parse::<Variant>().unwrap(), Variant::Single(22));
    let p = FusionParams::new(&config(Variant::Single(1)), &Init::new(0)).unwrap();
    let (_, raw) = inputs(8, L, M);
    let base = select_single(&raw, &p).unwrap();
    let mut other = raw.clone();
    for i in [0, 2, 3] {
        other[i].values = other[i].values.map(|v| v + 1.0);
    }
    assert!(select_single(&other, &p).unwrap().bitwise_eq(&base));
    let bad = FusionConfig::new(Variant::Single(M), D_RAW, D);
    assert!(FusionParams::new(&FusionConfig { total_depth: M, ..bad }, &Init::new(0)).is_err());
    assert!(select_single(&raw, &random_params(Variant::Mean, 0)).is_err());
}

fn film_params(scale: Array, shift: Array) -> FusionParams {
    let mut cfg = FusionConfig::new(Variant::Film, 3, 2);
    cfg.total_depth = 2;
    cfg.m = 2;
    let mut p = FusionParams::new(&cfg, &Init::new(0)).unwrap();
    set(&mut p.injection.w_scale, scale);
    set(&mut p.injection.w_shift, shift);
    p
}

#[test]
fn residual_injection_examples() {
    let mut p = FusionParams::new(&config(Variant::Dynamic), &Init::new(0)).unwrap();
    let (q, _) = inputs(11, L, M);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = uniform(&mut rng, &[L, D], 2.0);
    assert!(inject_residual(&q, &f, &p).unwrap().bitwise_eq(&q));
    set(&mut p.injection.w_out, uniform(&mut rng, &[D, D], 1.0));
    assert!(inject_residual(&q, &Array::zeros(&[L, D]), &p).unwrap().bitwise_eq(&q));
    set(&mut p.injection.w_out, Array::eye(D));
    assert_eq!(inject_residual(&q, &q, &p).unwrap(), q.map(|v| 2.0 * v));
    assert!(inject_residual(&q, &Array::zeros(&[L + 1, D]), &p).is_err());
}

#[test]
fn film_injection_examples() {
    let q = Array::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let f = Array::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let p = film_params(
        Array::matrix(2, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap(),
        Array::matrix(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap(),
    );
    assert_eq!(inject_film(&q, &f, &p).unwrap().data(), &[2.5, 0.5]);
    assert_eq!(inject_film(&q, &Array::zeros(&[1, 2]), &p).unwrap(), q);
    let p = film_params(Array::zeros(&[2, 2]), Array::zeros(&[2, 2]));
    assert_eq!(inject_film(&q, &f, &p).unwrap(), q);
}

#[test]
fn gated2d_examples() {
    let mut p = FusionParams::new(&config(Variant::Gated2D), &Init::new(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (q, f) = (uniform(&mut rng, &[L, D], 2.0), uniform(&mut rng, &[L, D], 2.0));
    let w_out = uniform(&mut rng, &[D, D], 1.0);
    set(&mut p.injection.w_out, w_out.clone());
    assert_eq!(inject_gated2d(&q, &Array::zeros(&[L, D]), &p).unwrap(), q);

    set(&mut p.injection.w_gate, Array::zeros(&[D, D]));
    let mut half = FusionParams::new(&config(Variant::Dynamic), &Init::new(0)).unwrap();
    set(&mut half.injection.w_out, w_out.map(|v| 0.5 * v));
    assert!(inject_gated2d(&q, &f, &p).unwrap().max_abs_diff(&inject_residual(&q, &f, &half).unwrap()) < 1e-12);

    // Every gate logit equals 40.
    let ones = Array::full(&[L, D], 1.0);
    set(&mut p.injection.w_gate, Array::full(&[D, D], 40.0 / D as f64));
    let mut full = half.clone();
    set(&mut full.injection.w_out, w_out);
    let gated = inject_gated2d(&ones, &f, &p).unwrap();
    assert!(gated.max_abs_diff(&inject_residual(&ones, &f, &full).unwrap()) < 1e-6);
}

#[test]
fn gated2d3d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (q, f) = (uniform(&mut rng, &[L, D], 2.0), uniform(&mut rng, &[L, D], 2.0));
    let w_out = uniform(&mut rng, &[D, D], 1.0);
    let mut p2 = FusionParams::new(&config(Variant::Gated2D), &Init::new(0)).unwrap();
    let mut p3 = FusionParams::new(&config(Variant::Gated2D3D), &Init::new(0)).unwrap();
    set(&mut p2.injection.w_out, w_out.clone());
    set(&mut p3.injection.w_out, w_out);

    set(&mut p2.injection.w_gate, Array::zeros(&[D, D]));
    set(&mut p3.injection.w_gate, Array::zeros(&[2 * D, D]));
    assert_eq!(inject_gated2d3d(&q, &f, &p3).unwrap(), inject_gated2d(&q, &f, &p2).unwrap());
    assert_eq!(inject_gated2d3d(&q, &Array::zeros(&[L, D]), &p3).unwrap(), q);

    let top = uniform(&mut rng, &[D, D], 1.0);
    let mut stacked = top.data().to_vec();
    stacked.extend(std::iter::repeat_n(0.0, D * D));
    set(&mut p2.injection.w_gate, top);
    set(&mut p3.injection.w_gate, Array::matrix(2 * D, D, stacked).unwrap());
    assert!(inject_gated2d3d(&q, &f, &p3).unwrap().bitwise_eq(&inject_gated2d(&q, &f, &p2).unwrap()));

    set(&mut p3.injection.w_gate, Array::zeros(&[D, D]));
    assert!(inject_gated2d3d(&q, &f, &p3).is_err());
}

#[test]
fn two_d_only_passes_queries_through() {
    let p = FusionParams::new(&config(Variant::TwoDOnly), &Init::new(0)).unwrap();
    let (q, raw) = inputs(14, L, M);
    let (out, plan) = fuse(&q, &raw, &p).unwrap();
    assert!(out.bitwise_eq(&q));
    assert!(plan.is_none());
}

#[test]
fn fresh_parameters_are_identity() {
    let (q, raw) = inputs(15, L, M);
    for v in [
        Variant::Dynamic,
        Variant::Single(1),
        Variant::Mean,
        Variant::SplitProj,
        Variant::Film,
        Variant::Gated2D,
        Variant::Gated2D3D,
    ] {
        let p = FusionParams::new(&config(v), &Init::new(15)).unwrap();
        let (out, plan) = fuse(&q, &raw, &p).unwrap();
        assert!(out.bitwise_eq(&q), "{v}");
        assert_eq!(plan.is_some(), v.is_routed(), "{v}");
    }
}

/// Dynamic with `k = M` and Mean share parameter names, hence values.
fn dense_pair(seed: u64) -> (FusionParams, FusionParams) {
    let mut dynamic = FusionParams::new(&FusionConfig { k: M, ..config(Variant::Dynamic) }, &Init::new(seed)).unwrap();
    let mut mean = FusionParams::new(&config(Variant::Mean), &Init::new(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_out = uniform(&mut rng, &[D, D], 1.0);
    set(&mut dynamic.injection.w_out, w_out.clone());
    set(&mut mean.injection.w_out, w_out);
    (dynamic, mean)
}

#[test]
fn dense_dynamic_matches_mean_iff_logits_are_row_constant() {
    let (mut dynamic, mean) = dense_pair(16);
    let (q, raw) = inputs(16, L, M);
    let (a, _) = fuse(&q, &raw, &dynamic).unwrap();
    let (b, _) = fuse(&q, &raw, &mean).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
    // Zero second layer: every logit is 0.
    let r = dynamic.router.as_mut().unwrap();
    r.fc2.weight.value = Array::zeros(r.fc2.weight.value.shape());
    let (a, plan) = fuse(&q, &raw, &dynamic).unwrap();
    assert!(plan.unwrap().weights.data().iter().all(|&w| w == 0.25));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn routing_summary_examples() {
    assert_eq!(routing_summary(&SparseRoutingPlan::one_hot(&[3, 3], 5)), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    assert_eq!(routing_summary(&SparseRoutingPlan::uniform(3, 4)), vec![0.25; 4]);
    assert_eq!(routing_summary(&SparseRoutingPlan::one_hot(&[0, 1, 1, 0], 3)), vec![0.5, 0.5, 0.0]);
}

#[test]
fn router_receives_gradient_and_unselected_slots_do_not() {
    let p = random_params(Variant::Dynamic, 17);
    let (q, raw) = inputs(17, L, M);
    let mut t = Tape::new();
    let qv = t.constant(q).unwrap();
    let out = fuse_on(&mut t, qv, &raw, &p).unwrap();
    let s = t.sum(out.q_hat).unwrap();
    let sq = t.mul(s, s).unwrap();
    t.backward(sq).unwrap();
    let grads = t.param_grads();
    for name in ["fusion.router.fc1.weight", "fusion.router.fc2.weight"] {
        assert!(grads[name].data().iter().any(|&g| g != 0.0), "{name}");
    }

    // Perturbing a slot no token selected leaves the aggregate untouched.
    let bank = build_bank(&raw, &p).unwrap();
    let plan = out.plan.unwrap();
    let f = aggregate(&bank, &plan).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for l in 0..L {
        let mut entries = bank.entries.clone();
        let unselected = (0..M).find(|i| !plan.selected[l].contains(i)).unwrap();
        for v in &mut entries.data_mut()[(l * M + unselected) * D..(l * M + unselected + 1) * D] {
            *v += rng.gen_range(-5.0..5.0);
        }
        let perturbed = FeatureBank::new(entries, bank.source_layers.clone()).unwrap();
        assert!(aggregate(&perturbed, &plan).unwrap().bitwise_eq(&f));
    }
}

#[test]
fn end_to_end_gradient_check() {
    for v in [Variant::Dynamic, Variant::SplitProj, Variant::Film, Variant::Gated2D3D] {
        let r = fusion_check(v, 21).unwrap();
        assert!(r.passed, "{r}");
    }
}

fn permute_rows(a: &Array, perm: &[usize]) -> Array {
    let (_, c) = a.dims2().unwrap();
    Array::matrix(perm.len(), c, perm.iter().flat_map(|&i| a.row(i).to_vec()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fuse_is_token_permutation_equivariant(seed in 0u64..1000, perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        for v in [Variant::Dynamic, Variant::Mean, Variant::Gated2D3D, Variant::Film] {
            let p = random_params(v, seed);
            let (q, raw) = inputs(seed, 5, M);
            let (out, _) = fuse(&q, &raw, &p).unwrap();
            let raw_p: Vec<RawLayerFeature> = raw
                .iter()
                .map(|r| RawLayerFeature { layer_index: r.layer_index, values: permute_rows(&r.values, &perm) })
                .collect();
            let (out_p, _) = fuse(&permute_rows(&q, &perm), &raw_p, &p).unwrap();
            prop_assert!(out_p.bitwise_eq(&permute_rows(&out, &perm)));
        }
    }

    #[test]
    fn selection_survives_positive_affine_logit_maps(seed in 0u64..1000, a in 0.01f64..20.0, b in -30.0f64..30.0) {
        let p = random_params(Variant::Dynamic, seed);
        let (q, _) = inputs(seed, 6, M);
        let plan = route(&q, &p).unwrap();
        for l in 0..6 {
            let row = plan.logits.row(l);
            let mapped: Vec<f64> = row.iter().map(|s| a * s + b).collect();
            prop_assert_eq!(topk_indices(&mapped, p.k).unwrap(), plan.selected[l].clone());
            let shifted: Vec<f64> = row.iter().map(|s| s + b).collect();
            let w = masked_softmax_rows(&Array::matrix(1, M, shifted).unwrap(), &[plan.selected[l].clone()]).unwrap();
            for (x, y) in w.data().iter().zip(plan.weights.row(l)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_w_out_is_identity_for_residual_variants(seed in 0u64..1000) {
        for v in [Variant::Dynamic, Variant::Single(3), Variant::Mean, Variant::SplitProj, Variant::Gated2D, Variant::Gated2D3D] {
            let mut p = random_params(v, seed);
            set(&mut p.injection.w_out, Array::zeros(&[D, D]));
            let (q, raw) = inputs(seed, L, M);
            prop_assert!(fuse(&q, &raw, &p).unwrap().0.bitwise_eq(&q));
        }
    }
}
