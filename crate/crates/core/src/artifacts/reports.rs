use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::{pooled_summary, SparseRoutingPlan};
use crate::synthbench::TaskMetrics;

pub const ROUTING_CSV: &str = "routing.csv";
pub const ROUTING_SUMMARY_JSON: &str = "routing_summary.json";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_plan(plan: &SparseRoutingPlan, source_layers: &[usize]) -> Result<()> {
    if plan.m() != source_layers.len() {
        return Err(Error::invalid(format!(
            "plan over {} slots for {} source layers",
            plan.m(),
            source_layers.len()
        )));
    }
    Ok(())
}

/// `token_index,layer_index_global,weight`, one row per nonzero weight.
/// Token indices run on across consecutive plans.
pub fn routing_csv(plans: &[SparseRoutingPlan], source_layers: &[usize]) -> Result<String> {
    let mut out = String::from("token_index,layer_index_global,weight\n");
    let mut token = 0usize;
    for plan in plans {
        check_plan(plan, source_layers)?;
        for l in 0..plan.tokens() {
            for (i, &w) in plan.weights.row(l).iter().enumerate() {
                if w != 0.0 {
                    writeln!(out, "{token},{},{w}", source_layers[i]).expect("writing to a String");
                }
            }
            token += 1;
        }
    }
    Ok(out)
}

/// Mean weight per layer over all tokens, in percent, keyed by global layer
/// index. Layers that never receive weight are left out.
pub fn routing_summary_json(plans: &[SparseRoutingPlan], source_layers: &[usize]) -> Result<String> {
    for plan in plans {
        check_plan(plan, source_layers)?;
    }
    let summary = pooled_summary(plans).ok_or_else(|| Error::invalid("no routing plans"))?;
    let mut map = serde_json::Map::new();
    for (&layer, &w) in source_layers.iter().zip(&summary) {
        if w != 0.0 {
            map.insert(layer.to_string(), serde_json::Value::from(100.0 * w));
        }
    }
    Ok(serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("summary serializes") + "\n")
}

/// Writes `routing.csv` and `routing_summary.json` into `dir`.
pub fn write_routing_dump(plans: &[SparseRoutingPlan], source_layers: &[usize], dir: &Path) -> Result<[PathBuf; 2]> {
    let csv = routing_csv(plans, source_layers)?;
    let json = routing_summary_json(plans, source_layers)?;
    let (csv_path, json_path) = (dir.join(ROUTING_CSV), dir.join(ROUTING_SUMMARY_JSON));
    write(&csv_path, &csv)?;
    write(&json_path, &json)?;
    Ok([csv_path, json_path])
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub metrics: TaskMetrics,
}

/// `variant,task_0,..,task_{T-1},aggregate`; absent tasks are empty fields.
pub fn results_csv(rows: &[ResultRow], num_tasks: usize) -> Result<String> {
    let mut out = String::from("variant");
    for t in 0..num_tasks {
        write!(out, ",task_{t}").expect("writing to a String");
    }
    out.push_str(",aggregate\n");
    for row in rows {
        if row.metrics.per_task.len() != num_tasks {
            return Err(Error::invalid(format!(
                "row `{}` has {} task columns, expected {num_tasks}",
                row.label,
                row.metrics.per_task.len()
            )));
        }
        if row.label.contains([',', '"', '\n']) {
            return Err(Error::invalid(format!("label `{}` needs quoting", row.label)));
        }
        out.push_str(&row.label);
        for v in &row.metrics.per_task {
            match v {
                Some(x) => write!(out, ",{x}"),
                None => write!(out, ","),
            }
            .expect("writing to a String");
        }
        writeln!(out, ",{}", row.metrics.aggregate).expect("writing to a String");
    }
    Ok(out)
}

pub fn write_results_table(rows: &[ResultRow], num_tasks: usize, path: &Path) -> Result<()> {
    write(path, &results_csv(rows, num_tasks)?)
}
