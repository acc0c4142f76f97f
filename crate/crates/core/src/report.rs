//! Result rows, CSV/JSON emission, and aggregated tables.
//!
//! Every metric produced by an experiment becomes one [`MetricRow`] keyed by
//! (dataset, strategy, trained tasks, eval task, fold). The report stage
//! groups rows into per-question tables: raw metric summaries, delta-m
//! against single-task baselines, transfer tables, and the drop matrix for
//! single-task cross-task probes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One measured metric. `value` is a percentage (accuracy or ROC AUC x 100).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub strategy: String,
    pub trained_tasks: String,
    pub eval_task: String,
    pub probe: String,
    pub experiment: String,
    pub fold: usize,
    pub metric: String,
    pub value: f64,
}

/// Mean relative difference (in percent) of task metrics against baselines:
/// `100/T * sum_i (multi_i - base_i) / base_i`.
pub fn delta_m(multi: &[f64], baseline: &[f64]) -> Result<f64> {
    if multi.len() != baseline.len() {
        return Err(Error::Argument(format!(
            "delta_m needs equal lengths, got {} and {}",
            multi.len(),
            baseline.len()
        )));
    }
    if multi.is_empty() {
        return Err(Error::Argument("delta_m of empty metric lists".into()));
    }
    if baseline.iter().any(|&b| b <= 0.0) {
        return Err(Error::Argument("delta_m baselines must be positive".into()));
    }
    let sum: f64 = multi
        .iter()
        .zip(baseline)
        .map(|(m, b)| (m - b) / b)
        .sum();
    Ok(100.0 * sum / multi.len() as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Deterministic provenance header embedded in every emitted file.
pub fn provenance_line(config_hash: u64, seed: u64) -> String {
    format!("# config_hash={config_hash:016x} seed={seed}\n")
}

/// Stable FNV-1a hash of a canonical config string (independent of the
/// platform and Rust version, unlike the std hasher).
pub fn config_hash(canonical: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canonical.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn rows_to_csv(rows: &[MetricRow], config_hash_value: u64, seed: u64) -> String {
    let mut out = provenance_line(config_hash_value, seed);
    out.push_str("dataset,strategy,trained_tasks,eval_task,probe,experiment,fold,metric,value\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6}",
            r.dataset,
            r.strategy,
            r.trained_tasks,
            r.eval_task,
            r.probe,
            r.experiment,
            r.fold,
            r.metric,
            r.value
        );
    }
    out
}

pub fn write_rows(path: &Path, rows: &[MetricRow], config_hash_value: u64, seed: u64) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path.with_extension("csv"), rows_to_csv(rows, config_hash_value, seed))?;
    let json = serde_json::json!({
        "config_hash": format!("{config_hash_value:016x}"),
        "seed": seed,
        "rows": rows,
    });
    fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&json).expect("metric rows serialize"),
    )?;
    Ok(())
}

/// Reads rows back from a metrics JSON file written by [`write_rows`].
pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let content = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&content)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rows = value
        .get("rows")
        .ok_or_else(|| Error::Format(format!("{}: missing rows field", path.display())))?;
    serde_json::from_value(rows.clone())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Recursively collects rows from every `*.json` metrics file under `dir`.
pub fn collect_rows(dir: &Path) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    let mut files = Vec::new();
    while let Some(current) = stack.pop() {
        for entry in fs::read_dir(&current)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                files.push(path);
            }
        }
    }
    files.sort();
    for file in files {
        if let Ok(mut r) = read_rows(&file) {
            rows.append(&mut r);
        }
    }
    Ok(rows)
}

type GroupKey = (String, String, String, String, String, String, String);

fn group_rows(rows: &[MetricRow]) -> BTreeMap<GroupKey, Vec<f64>> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.dataset.clone(),
                r.strategy.clone(),
                r.trained_tasks.clone(),
                r.eval_task.clone(),
                r.probe.clone(),
                r.experiment.clone(),
                r.metric.clone(),
            ))
            .or_default()
            .push(r.value);
    }
    groups
}

/// Per-group mean and standard deviation over folds.
pub fn summary_csv(rows: &[MetricRow], config_hash_value: u64, seed: u64) -> String {
    let mut out = provenance_line(config_hash_value, seed);
    out.push_str(
        "dataset,strategy,trained_tasks,eval_task,probe,experiment,metric,folds,mean,std\n",
    );
    for ((ds, strat, trained, eval_task, probe, exp, metric), values) in group_rows(rows) {
        let (mean, std) = mean_std(&values);
        let _ = writeln!(
            out,
            "{ds},{strat},{trained},{eval_task},{probe},{exp},{metric},{},{mean:.1},{std:.1}",
            values.len()
        );
    }
    out
}

/// Baseline lookup: per-fold metric of the classical single-task model
/// (head evaluation) for a (dataset, task).
fn single_task_baselines(rows: &[MetricRow]) -> BTreeMap<(String, String, usize), f64> {
    let mut out = BTreeMap::new();
    for r in rows {
        if r.strategy == "classical-st" && r.trained_tasks == r.eval_task && r.probe == "head" {
            out.insert((r.dataset.clone(), r.eval_task.clone(), r.fold), r.value);
        }
    }
    out
}

/// Delta-m table: for every (dataset, strategy, trained-task combination)
/// with per-fold metrics on all its trained tasks, the per-fold delta-m
/// against the classical single-task baselines, aggregated mean ± std.
pub fn delta_m_csv(rows: &[MetricRow], config_hash_value: u64, seed: u64) -> Result<String> {
    let baselines = single_task_baselines(rows);
    let mut out = provenance_line(config_hash_value, seed);
    out.push_str("dataset,strategy,trained_tasks,probe,folds,delta_m_mean,delta_m_std\n");

    // (dataset, strategy, trained_tasks, probe) -> fold -> task -> value
    type DeltaGroups = BTreeMap<(String, String, String, String), BTreeMap<usize, BTreeMap<String, f64>>>;
    let mut groups: DeltaGroups = BTreeMap::new();
    for r in rows {
        if r.experiment == "transfer" {
            continue;
        }
        groups
            .entry((
                r.dataset.clone(),
                r.strategy.clone(),
                r.trained_tasks.clone(),
                r.probe.clone(),
            ))
            .or_default()
            .entry(r.fold)
            .or_default()
            .insert(r.eval_task.clone(), r.value);
    }

    for ((ds, strat, trained, probe), folds) in groups {
        let tasks: Vec<&str> = trained.split('+').collect();
        let mut deltas = Vec::new();
        for (fold, metrics) in &folds {
            let mut multi = Vec::new();
            let mut base = Vec::new();
            for task in &tasks {
                let (Some(m), Some(b)) = (
                    metrics.get(*task),
                    baselines.get(&(ds.clone(), task.to_string(), *fold)),
                ) else {
                    continue;
                };
                multi.push(*m);
                base.push(*b);
            }
            if multi.len() == tasks.len() && !multi.is_empty() {
                deltas.push(delta_m(&multi, &base)?);
            }
        }
        if deltas.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&deltas);
        let _ = writeln!(
            out,
            "{ds},{strat},{trained},{probe},{},{mean:.1},{std:.1}",
            deltas.len()
        );
    }
    Ok(out)
}

/// Single-task table: strategies evaluated on the one task they trained on.
pub fn q1_csv(rows: &[MetricRow], config_hash_value: u64, seed: u64) -> String {
    let single: Vec<MetricRow> = rows
        .iter()
        .filter(|r| r.experiment != "transfer" && r.trained_tasks == r.eval_task)
        .cloned()
        .collect();
    let mut out = provenance_line(config_hash_value, seed);
    out.push_str("dataset,task,strategy,probe,metric,folds,mean,std\n");
    for ((ds, strat, _trained, eval_task, probe, _exp, metric), values) in group_rows(&single) {
        let (mean, std) = mean_std(&values);
        let _ = writeln!(
            out,
            "{ds},{eval_task},{strat},{probe},{metric},{},{mean:.1},{std:.1}",
            values.len()
        );
    }
    out
}

/// Transfer table (the `x,y -> z` rows): aggregated transfer-experiment
/// metrics per source task set and evaluation task.
pub fn transfer_csv(rows: &[MetricRow], config_hash_value: u64, seed: u64) -> String {
    let transfer_rows: Vec<MetricRow> = rows
        .iter()
        .filter(|r| r.experiment == "transfer")
        .cloned()
        .collect();
    let mut out = provenance_line(config_hash_value, seed);
    out.push_str("dataset,strategy,source_tasks,eval_task,probe,metric,folds,mean,std\n");
    for ((ds, strat, trained, eval_task, probe, _exp, metric), values) in group_rows(&transfer_rows)
    {
        let (mean, std) = mean_std(&values);
        let _ = writeln!(
            out,
            "{ds},{strat},{trained},{eval_task},{probe},{metric},{},{mean:.1},{std:.1}",
            values.len()
        );
    }
    out
}

/// Drop matrix for single-task sources: metric of `source -> target` probes
/// and the relative drop against the target's own single-task baseline.
pub fn drop_matrix_csv(rows: &[MetricRow], config_hash_value: u64, seed: u64) -> String {
    let baselines = single_task_baselines(rows);
    // aggregate baselines over folds
    let mut base_mean: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for ((ds, task, _), value) in &baselines {
        base_mean
            .entry((ds.clone(), task.clone()))
            .or_default()
            .push(*value);
    }

    let single_source: Vec<MetricRow> = rows
        .iter()
        .filter(|r| r.experiment == "transfer" && !r.trained_tasks.contains('+'))
        .cloned()
        .collect();
    let mut out = provenance_line(config_hash_value, seed);
    out.push_str("dataset,strategy,source_task,target_task,probe,mean,std,baseline_mean,drop_pct\n");
    for ((ds, strat, source, target, probe, _exp, _metric), values) in group_rows(&single_source) {
        let (mean, std) = mean_std(&values);
        let baseline = base_mean
            .get(&(ds.clone(), target.clone()))
            .map(|vs| mean_std(vs).0);
        let (baseline_str, drop_str) = match baseline {
            Some(b) if b > 0.0 => (format!("{b:.1}"), format!("{:.1}", 100.0 * (mean - b) / b)),
            _ => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{ds},{strat},{source},{target},{probe},{mean:.1},{std:.1},{baseline_str},{drop_str}"
        );
    }
    out
}
