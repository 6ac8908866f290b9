//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed and the training-heavy criteria
//! run one after another.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use georoute::artifacts::{decode, encode, save_model};
use georoute::fusion::{
    fuse, pooled_summary, route, FusionConfig, FusionParams, Init, RawLayerFeature, SelectionStrategy, Variant,
};
use georoute::gradsuite;
use georoute::numerics::{masked_softmax_rows, topk_indices, Array, Param, Parameterized};
use georoute::synthbench::{
    ordering_holds, relative_gap, run_ablation, run_cell, Budget, Model, ModelConfig, SceneGenerator, SceneSpec,
    SceneStream, EVAL_OFFSET,
};
use georoute::trainer::{adamw_step, lr_at, train_loop, AdamWConfig, OptimizerState, ScheduleSpec, TrainConfig};
use georoute::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn randomize(p: &mut impl Parameterized, rng: &mut ChaCha8Rng, bound: f64) {
    for param in p.params_mut() {
        let shape = param.value.shape().to_vec();
        param.value = uniform(rng, &shape, bound);
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = gradsuite::full_suite(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    ensure(failed.is_empty(), format!("failed: {failed:?}"))?;
    ensure(worst < 1e-4, format!("max rel error {worst:e}"))?;
    ensure(elapsed < 60.0, format!("took {elapsed:.1} s"))?;
    Ok(format!("{} checks, max rel error {worst:.2e}, {elapsed:.1} s", reports.len()))
}

/// Independent top-k: sort by descending value, ties by ascending index.
fn topk_oracle(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn dense_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn routing_case(case: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let (d, d_raw) = (8, 6);
    let m = rng.gen_range(1..=12);
    let k = rng.gen_range(1..=m);
    let l = rng.gen_range(1..=6);
    let cfg = FusionConfig {
        total_depth: m,
        m,
        k,
        ..FusionConfig::new(Variant::Dynamic, d_raw, d)
    };
    let mut params = FusionParams::new(&cfg, &Init::new(case)).map_err(|e| e.to_string())?;
    randomize(&mut params, &mut rng, 1.0);
    let q = uniform(&mut rng, &[l, d], 2.0);
    let plan = route(&q, &params).map_err(|e| e.to_string())?;
    let want = k.min(m);
    for t in 0..l {
        let w = plan.weights.row(t);
        let sum: f64 = w.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-12, format!("case {case}: row {t} sums to {sum}"))?;
        let nonzero = w.iter().filter(|&&x| x != 0.0).count();
        ensure(nonzero == want, format!("case {case}: {nonzero} nonzeros, want {want}"))?;
        let logits = plan.logits.row(t);
        ensure(
            sorted(plan.selected[t].clone()) == topk_oracle(logits, k),
            format!("case {case}: selection differs from oracle"),
        )?;
        let (a, b) = (rng.gen_range(0.01..10.0), rng.gen_range(-50.0..50.0));
        let moved: Vec<f64> = logits.iter().map(|x| a * x + b).collect();
        let sel = sorted(topk_indices(&moved, k).map_err(|e| e.to_string())?);
        ensure(sel == sorted(plan.selected[t].clone()), format!("case {case}: affine transform moved selection"))?;
    }
    // all slots selected: dense softmax
    let all: Vec<Vec<usize>> = vec![(0..m).collect(); l];
    let dense = masked_softmax_rows(&plan.logits, &all).map_err(|e| e.to_string())?;
    for t in 0..l {
        for (x, y) in dense.row(t).iter().zip(dense_softmax(plan.logits.row(t))) {
            ensure((x - y).abs() <= 1e-12, format!("case {case}: K=M differs from softmax"))?;
        }
    }
    // ties on a coarse grid resolve to the lowest index, every time
    let tied: Vec<f64> = (0..m).map(|_| rng.gen_range(0..3) as f64).collect();
    let first = sorted(topk_indices(&tied, k).map_err(|e| e.to_string())?);
    let again = sorted(topk_indices(&tied, k).map_err(|e| e.to_string())?);
    ensure(first == topk_oracle(&tied, k) && first == again, format!("case {case}: tie broken wrongly"))?;
    Ok(())
}

fn routing_invariants() -> Verdict {
    let cases = 1000;
    for case in 0..cases {
        routing_case(case)?;
    }
    Ok(format!("{cases} randomized cases"))
}

fn set_w_out(p: &mut FusionParams, w: &Array) {
    p.injection.w_out.as_mut().expect("w_out").value = w.clone();
}

fn fusion_inputs(rng: &mut ChaCha8Rng, l: usize, d: usize, d_raw: usize, depth: usize) -> (Array, Vec<RawLayerFeature>) {
    let q = uniform(rng, &[l, d], 2.0);
    let raw = (0..depth)
        .map(|i| RawLayerFeature {
            layer_index: i,
            values: uniform(rng, &[l, d_raw], 2.0),
        })
        .collect();
    (q, raw)
}

fn equivalence_oracles() -> Verdict {
    let (l, d, d_raw, m) = (5, 8, 6, 4);
    let base = |variant, total_depth, m, k| FusionConfig {
        total_depth,
        m,
        k,
        ..FusionConfig::new(variant, d_raw, d)
    };
    let mut worst_mean = 0.0f64;
    let mut worst_single = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_out = uniform(&mut rng, &[d, d], 1.0);
        let (q, raw) = fusion_inputs(&mut rng, l, d, d_raw, m);

        // Mean vs Dynamic with every logit equal, hence uniform weights
        let mut dynamic = FusionParams::new(&base(Variant::Dynamic, m, m, m), &Init::new(seed)).unwrap();
        let mut mean = FusionParams::new(&base(Variant::Mean, m, m, 2), &Init::new(seed)).unwrap();
        let router = dynamic.router.as_mut().unwrap();
        router.fc2.weight.value = Array::zeros(router.fc2.weight.value.shape());
        set_w_out(&mut dynamic, &w_out);
        set_w_out(&mut mean, &w_out);
        let (a, plan) = fuse(&q, &raw, &dynamic).map_err(|e| e.to_string())?;
        let (b, _) = fuse(&q, &raw, &mean).map_err(|e| e.to_string())?;
        ensure(
            plan.unwrap().weights.data().iter().all(|&w| w == 0.25),
            "forced weights are not uniform",
        )?;
        worst_mean = worst_mean.max(a.max_abs_diff(&b));

        // Single(j) vs Dynamic over the one-layer bank {j}
        let j = (seed as usize) % m;
        let mut single = FusionParams::new(&base(Variant::Single(j), m, m, 2), &Init::new(seed)).unwrap();
        let mut one = FusionParams::new(&base(Variant::Dynamic, j + 1, 1, 1), &Init::new(seed)).unwrap();
        ensure(one.source_layers == vec![j], "one-layer bank holds the wrong layer")?;
        set_w_out(&mut single, &w_out);
        set_w_out(&mut one, &w_out);
        let (a, _) = fuse(&q, &raw, &single).map_err(|e| e.to_string())?;
        let (b, _) = fuse(&q, &raw, &one).map_err(|e| e.to_string())?;
        worst_single = worst_single.max(a.max_abs_diff(&b));

        // zero output projection: exact identity on q
        for v in [
            Variant::Dynamic,
            Variant::Mean,
            Variant::Single(j),
            Variant::SplitProj,
            Variant::Film,
            Variant::Gated2D,
            Variant::Gated2D3D,
        ] {
            let mut p = FusionParams::new(&base(v, m, m, 2), &Init::new(seed)).unwrap();
            randomize(&mut p, &mut rng, 0.5);
            if let Some(w) = p.injection.w_out.as_mut() {
                w.value = Array::zeros(&[d, d]);
            }
            if let Some(w) = p.injection.w_scale.as_mut() {
                w.value = Array::zeros(w.value.shape());
            }
            if let Some(w) = p.injection.w_shift.as_mut() {
                w.value = Array::zeros(w.value.shape());
            }
            let (out, _) = fuse(&q, &raw, &p).map_err(|e| e.to_string())?;
            ensure(out.bitwise_eq(&q), format!("{v}: zero output projection is not the identity"))?;
        }
    }
    ensure(worst_mean <= 1e-12, format!("Mean vs uniform Dynamic differ by {worst_mean:e}"))?;
    ensure(worst_single <= 1e-12, format!("Single vs one-layer Dynamic differ by {worst_single:e}"))?;
    Ok(format!(
        "20 seeds; Mean gap {worst_mean:.1e}, Single gap {worst_single:.1e}, zero projection bitwise identity"
    ))
}

fn budget(seed: u64) -> Budget {
    Budget {
        schedule: ScheduleSpec::new(500, 3e-3),
        train: TrainConfig {
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        },
        eval_batches: 8,
    }
}

fn scene(seed: u64, noise_sigma: f64) -> SceneSpec {
    SceneSpec {
        seed,
        noise_sigma,
        ..SceneSpec::default()
    }
}

fn model_config(spec: &SceneSpec, variant: Variant) -> ModelConfig {
    ModelConfig::for_scene(spec, FusionConfig::new(variant, spec.raw_width, spec.query_width))
}

fn fmt_tasks(v: &[Option<f64>]) -> String {
    v.iter().map(|x| x.map_or("-".into(), |x| format!("{x:.3}"))).collect::<Vec<_>>().join(" ")
}

fn misalignment() -> Verdict {
    let start = Instant::now();
    let spec = scene(0, SceneSpec::default().noise_sigma);
    let base = model_config(&spec, Variant::Single(13));
    let rows = run_ablation(&[Variant::Single(13), Variant::Single(22)], &spec, &base, &budget(0))
        .map_err(|e| e.to_string())?;
    let (a, b) = (&rows[0].report.metrics.per_task, &rows[1].report.metrics.per_task);
    let (mut a_wins, mut b_wins) = (0, 0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.ok_or("missing task")?, y.ok_or("missing task")?);
        if relative_gap(x, y) >= 0.05 {
            a_wins += 1;
        }
        if relative_gap(y, x) >= 0.05 {
            b_wins += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!(
        "Single(13) [{}] vs Single(22) [{}], {elapsed:.0} s",
        fmt_tasks(a),
        fmt_tasks(b)
    );
    ensure(a_wins >= 1 && b_wins >= 1, detail.clone())?;
    ensure(elapsed < 600.0, detail.clone())?;
    Ok(detail)
}

fn ablation_ordering() -> Verdict {
    let grid = [Variant::TwoDOnly, Variant::Single(22), Variant::Mean, Variant::Dynamic];
    let mut held = 0;
    let mut lines = Vec::new();
    let mut latter_dynamic = None;
    for seed in 0..5 {
        let spec = scene(seed, SceneSpec::default().noise_sigma);
        let rows = run_ablation(&grid, &spec, &model_config(&spec, Variant::Dynamic), &budget(seed))
            .map_err(|e| e.to_string())?;
        let ordered = [&rows[3], &rows[2], &rows[1], &rows[0]];
        let ok = ordering_holds(&ordered, 0.05);
        held += ok as usize;
        let chain: Vec<String> = ordered.iter().map(|r| format!("{:.3}", r.report.metrics.aggregate)).collect();
        lines.push(format!("seed {seed} {} {}", chain.join("<"), if ok { "ok" } else { "x" }));
        if seed == 0 {
            latter_dynamic = Some(rows[3].report.metrics.aggregate);
        }
    }
    let spec = scene(0, SceneSpec::default().noise_sigma);
    let mut former = model_config(&spec, Variant::Dynamic);
    former.fusion.selection = SelectionStrategy::FormerHalf;
    let former = run_cell(&spec, &former, &budget(0)).map_err(|e| e.to_string())?;
    let (latter, former) = (latter_dynamic.unwrap(), former.report.metrics.aggregate);
    let detail = format!(
        "{held}/5 seeds [{}]; LatterHalf {latter:.3} vs FormerHalf {former:.3}",
        lines.join("; ")
    );
    ensure(held >= 4 && latter < former, detail.clone())?;
    Ok(detail)
}

fn routing_recovery() -> Verdict {
    let spec = scene(0, 0.1);
    let cell = run_cell(&spec, &model_config(&spec, Variant::Dynamic), &budget(0)).map_err(|e| e.to_string())?;
    let recovery = cell.report.recovery.ok_or("no recovery for a routed variant")?;
    let generator = SceneGenerator::new(spec.clone()).map_err(|e| e.to_string())?;
    let summary_for = |task: usize| -> Result<Vec<f64>, String> {
        let mut plans = Vec::new();
        for i in 0..8u64 {
            let seq = generator
                .sequence_with_tasks(EVAL_OFFSET + 10_000 + i, &[task])
                .map_err(|e| e.to_string())?;
            plans.push(cell.model.predict(&seq).map_err(|e| e.to_string())?.plan.ok_or("no plan")?);
        }
        pooled_summary(&plans).ok_or_else(|| "no plans".to_string())
    };
    let first = summary_for(0)?;
    let last = summary_for(spec.num_tasks - 1)?;
    let spread = first.iter().zip(&last).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let detail = format!("recovery {recovery:.3}, summary difference {:.1} pp (task 0 vs task 3 batches)", 100.0 * spread);
    ensure(recovery >= 0.8 && spread >= 0.10, detail.clone())?;
    Ok(detail)
}

fn trained_checkpoint(seed: u64, dir: &std::path::Path) -> Result<Vec<u8>, String> {
    let spec = SceneSpec {
        total_depth: 8,
        num_tokens: 6,
        num_tasks: 2,
        planted_layers: vec![5, 7],
        seed,
        ..SceneSpec::default()
    };
    let cfg = ModelConfig {
        fusion: FusionConfig {
            total_depth: 8,
            m: 4,
            ..FusionConfig::new(Variant::Dynamic, spec.raw_width, spec.query_width)
        },
        ..model_config(&spec, Variant::Dynamic)
    };
    let mut model = Model::new(&cfg, seed).map_err(|e| e.to_string())?;
    let stream = SceneStream::new(SceneGenerator::new(spec).map_err(|e| e.to_string())?, 2);
    let train = TrainConfig {
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    };
    train_loop(&mut model, &stream, &train, &ScheduleSpec::new(10, 3e-3)).map_err(|e| e.to_string())?;
    let path = dir.join(format!("seed{seed}.galn"));
    save_model(&path, &model).map_err(|e| e.to_string())?;
    std::fs::read(path).map_err(|e| e.to_string())
}

fn determinism_and_persistence() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = trained_checkpoint(3, dir.path())?;
    let b = trained_checkpoint(3, dir.path())?;
    ensure(a == b, "same seed gave different checkpoints")?;
    let decoded = decode(&a).map_err(|e| e.to_string())?;
    let refs: Vec<(&str, &Array)> = decoded.iter().map(|(n, x)| (n.as_str(), x)).collect();
    ensure(encode(&refs).map_err(|e| e.to_string())? == a, "round trip changed bytes")?;
    let mut corrupt = a.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x01;
    ensure(
        matches!(decode(&corrupt), Err(Error::ChecksumMismatch { .. })),
        "corrupted checkpoint accepted",
    )?;
    Ok(format!("{} byte checkpoint identical across runs, round trip bitwise, corruption rejected", a.len()))
}

fn scheduler_and_optimizer() -> Verdict {
    let mut worst_gap = 0.0f64;
    for total in [100, 500, 1000, 2000] {
        let spec = ScheduleSpec::new(total, 3e-3);
        let w = spec.warmup_steps();
        let left = spec.lr_peak * w as f64 / w as f64;
        let right = lr_at(w, &spec).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max((left - right).abs());
    }
    ensure(worst_gap <= 1e-15, format!("junction gap {worst_gap:e}"))?;
    let spec = ScheduleSpec::new(1000, 2e-3);
    let mid = spec.warmup_steps() + (1000 - spec.warmup_steps()) / 2;
    let lr_mid = lr_at(mid, &spec).map_err(|e| e.to_string())?;
    ensure(lr_mid == 0.5 * spec.lr_peak, format!("midpoint {lr_mid}"))?;
    let mut p = Param::new("w", Array::vector(vec![1.0]));
    let grads = BTreeMap::from([("w".to_string(), Array::vector(vec![1.0]))]);
    let mut state = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adamw_step(&mut [&mut p], &grads, &mut state, 0.1).map_err(|e| e.to_string())?;
    let v = p.value.item();
    ensure((v - 0.9).abs() < 1e-9, format!("first AdamW step gave {v}"))?;
    Ok(format!("junction gap {worst_gap:e}, midpoint exact, first AdamW step {v:.10}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("routing invariants", routing_invariants),
        ("equivalence oracles", equivalence_oracles),
        ("misalignment", misalignment),
        ("ablation ordering", ablation_ordering),
        ("routing recovery", routing_recovery),
        ("determinism and persistence", determinism_and_persistence),
        ("scheduler and optimizer", scheduler_and_optimizer),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let verdict = check();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
