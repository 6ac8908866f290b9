//! The `georoute` command line.
//!
//! Exit codes: 0 success, 1 a check failed (or a run could not complete),
//! 2 usage or config error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::artifacts::{
    load_config_file, load_model, save_model, write_results_table, write_routing_dump, ExperimentConfig, ResultRow,
};
use crate::error::{Error, Result};
use crate::fusion::{Aggregation, Variant};
use crate::gradsuite;
use crate::synthbench::{
    evaluate_model, ordering_holds, run_ablation, AblationRow, Budget, EvalReport, Model, SceneGenerator, SceneStream,
};
use crate::trainer::train_loop;

pub const CHECKPOINT_FILE: &str = "checkpoint.galn";
pub const LOSS_FILE: &str = "loss.csv";
pub const RESULTS_FILE: &str = "results.csv";

/// Relative gap required between neighbours of the ablation ordering.
pub const ORDERING_GAP: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "georoute", version, about = "Sparse top-k layer routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference checks of every kernel and the fusion pipeline.
    Gradcheck(Common),
    /// Train the configured variant; writes checkpoint.galn and loss.csv.
    Train(Common),
    /// Score a checkpoint on held-out data; writes results.csv and the routing dump.
    Eval(Common),
    /// Train every variant of the ablation grid; writes results.csv.
    Ablate(Common),
    /// Routing of one held-out batch; writes routing.csv and routing_summary.json.
    RouteDump(Common),
}

/// Failure classes, mapped onto exit codes.
enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit code. Reports go to `out`, diagnostics to stderr.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gradcheck(c) => gradcheck(c, out),
        Command::Train(c) => train(c, out),
        Command::Eval(c) => eval(c, out),
        Command::Ablate(c) => ablate(c, out),
        Command::RouteDump(c) => route_dump(c, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

/// [`run_with`] writing reports to standard output.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock())
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) {
    let _ = writeln!(out, "{line}");
}

fn load(c: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => load_config_file(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Usage(e.to_string()),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    Ok(&c.out)
}

fn budget(cfg: &ExperimentConfig) -> Budget {
    Budget {
        schedule: cfg.schedule(),
        train: cfg.train(),
        eval_batches: cfg.eval_batches,
    }
}

fn gradcheck(c: &Common, out: &mut dyn Write) -> Outcome {
    let cfg = load(c)?;
    let reports = gradsuite::full_suite(cfg.seed)?;
    for r in &reports {
        say(out, r);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    say(out, format_args!("{} checks, {failed} failed", reports.len()));
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn train(c: &Common, out: &mut dyn Write) -> Outcome {
    let cfg = load(c)?;
    let dir = out_dir(c)?;
    let generator = SceneGenerator::new(cfg.scene())?;
    let stream = SceneStream::new(generator, cfg.batch_size);
    let mut model = Model::new(&cfg.model(cfg.variant), cfg.seed)?;
    let outcome = train_loop(&mut model, &stream, &cfg.train(), &cfg.schedule())?;
    save_model(&dir.join(CHECKPOINT_FILE), &model)?;
    let loss_path = dir.join(LOSS_FILE);
    std::fs::write(&loss_path, outcome.log.to_csv()).map_err(|e| Error::io(&loss_path, e))?;
    let losses = outcome.log.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        say(
            out,
            format_args!("{}: {} steps, loss {first:.4} -> {last:.4}", cfg.variant, losses.len()),
        );
    }
    say(out, format_args!("wrote {}", dir.join(CHECKPOINT_FILE).display()));
    Ok(())
}

/// Model of the configured variant with parameters from `<out>/checkpoint.galn`.
fn restore(cfg: &ExperimentConfig, dir: &Path) -> Result<Model> {
    let mut model = Model::new(&cfg.model(cfg.variant), cfg.seed)?;
    load_model(&dir.join(CHECKPOINT_FILE), &mut model)?;
    Ok(model)
}

fn print_report(out: &mut dyn Write, label: &str, report: &EvalReport) {
    let per_task: Vec<String> = report
        .metrics
        .per_task
        .iter()
        .map(|m| m.map_or("-".to_string(), |v| format!("{v:.4}")))
        .collect();
    say(
        out,
        format_args!(
            "{label:<12} aggregate {:.4}  per task [{}]",
            report.metrics.aggregate,
            per_task.join(", ")
        ),
    );
    if let Some(r) = report.recovery {
        say(out, format_args!("{:<12} layer preference recovery {r:.3}", ""));
    }
}

fn eval(c: &Common, out: &mut dyn Write) -> Outcome {
    let cfg = load(c)?;
    let dir = out_dir(c)?;
    let model = restore(&cfg, dir)?;
    let spec = cfg.scene();
    let held_out = SceneStream::held_out(SceneGenerator::new(spec.clone())?, cfg.batch_size).batches(cfg.eval_batches);
    let report = evaluate_model(&model, &spec, &held_out)?;
    print_report(out, &cfg.variant.to_string(), &report);
    let row = ResultRow {
        label: cfg.variant.to_string(),
        metrics: report.metrics.clone(),
    };
    write_results_table(&[row], spec.num_tasks, &dir.join(RESULTS_FILE))?;
    if model.fusion.variant.is_routed() {
        write_routing_dump(&report.plans, &model.fusion.source_layers, dir)?;
    }
    Ok(())
}

/// Rows in the order Dynamic, Mean, Single, TwoDOnly when the grid holds
/// exactly one of each.
fn ordering_rows(rows: &[AblationRow]) -> Option<Vec<&AblationRow>> {
    let find = |agg: Aggregation, routed: bool| {
        let mut it = rows
            .iter()
            .filter(|r| r.variant.aggregation() == agg && (!routed || r.variant == Variant::Dynamic));
        let first = it.next()?;
        it.next().is_none().then_some(first)
    };
    Some(vec![
        find(Aggregation::Routed, true)?,
        find(Aggregation::Mean, false)?,
        find(Aggregation::Single, false)?,
        find(Aggregation::None, false)?,
    ])
}

fn ablate(c: &Common, out: &mut dyn Write) -> Outcome {
    let cfg = load(c)?;
    let dir = out_dir(c)?;
    let spec = cfg.scene();
    let rows = run_ablation(&cfg.ablation_variants, &spec, &cfg.model(cfg.variant), &budget(&cfg))?;
    for row in &rows {
        print_report(out, &row.variant.to_string(), &row.report);
    }
    let table: Vec<ResultRow> = rows
        .iter()
        .map(|r| ResultRow {
            label: r.variant.to_string(),
            metrics: r.report.metrics.clone(),
        })
        .collect();
    write_results_table(&table, spec.num_tasks, &dir.join(RESULTS_FILE))?;
    match ordering_rows(&rows) {
        None => say(out, "ordering: grid lacks one of Dynamic, Mean, Single, TwoDOnly; not checked"),
        Some(ordered) => {
            let holds = ordering_holds(&ordered, ORDERING_GAP);
            let chain: Vec<String> = ordered
                .iter()
                .map(|r| format!("{} {:.4}", r.variant, r.report.metrics.aggregate))
                .collect();
            say(
                out,
                format_args!(
                    "ordering {}: {}",
                    if holds { "holds" } else { "VIOLATED" },
                    chain.join(" < ")
                ),
            );
            if !holds {
                return Err(Failure::Check("ablation ordering violated".into()));
            }
        }
    }
    Ok(())
}

fn route_dump(c: &Common, out: &mut dyn Write) -> Outcome {
    let cfg = load(c)?;
    if !cfg.variant.is_routed() {
        return Err(Failure::Usage(format!("variant {} does not route", cfg.variant)));
    }
    let dir = out_dir(c)?;
    let model = restore(&cfg, dir)?;
    let spec = cfg.scene();
    let batch = SceneStream::held_out(SceneGenerator::new(spec.clone())?, cfg.batch_size).batches(1);
    let report = evaluate_model(&model, &spec, &batch)?;
    let [csv, json] = write_routing_dump(&report.plans, &model.fusion.source_layers, dir)?;
    if let Some(summary) = &report.routing_summary {
        let parts: Vec<String> = model
            .fusion
            .source_layers
            .iter()
            .zip(summary)
            .filter(|(_, w)| **w > 0.0)
            .map(|(l, w)| format!("{l}: {:.1}%", 100.0 * w))
            .collect();
        say(out, format_args!("mean routing weight {{{}}}", parts.join(", ")));
    }
    say(out, format_args!("wrote {} and {}", csv.display(), json.display()));
    Ok(())
}
