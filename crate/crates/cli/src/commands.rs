//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use same_core::evaluation::{score_params, EvalMode, ProbeKind};
use same_core::exec;
use same_core::graph::{make_folds_opts, FoldSplit, GraphDataset};
use same_core::model::{load_checkpoint, save_checkpoint, ModelConfig, Task, TaskSet};
use same_core::report::{
    self, collect_rows, config_hash, provenance_line, write_rows, MetricRow,
};
use same_core::synthetic;
use same_core::training::{train, CurvePoint, StrategyKind, TrainConfig, TrainOutcome};
use same_core::tudataset::write_tudataset;
use same_core::{Error, Result};

use crate::config::RunConfig;

pub fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    let nodes: usize = dataset.graphs.iter().map(|g| g.num_nodes()).sum();
    let edges: usize = dataset.graphs.iter().map(|g| g.num_edges()).sum();
    let count = dataset.len().max(1) as f64;
    println!(
        "{}: {} graphs, {} graph classes, {} node classes, feature dim {}",
        dataset.name,
        dataset.len(),
        dataset.num_graph_classes,
        dataset.num_node_classes,
        dataset.feature_dim
    );
    println!(
        "nodes total {nodes} (avg {:.1}), edges total {edges} (avg {:.1})",
        nodes as f64 / count,
        edges as f64 / count
    );
    Ok(())
}

fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

fn checkpoint_meta(cfg: &RunConfig, dataset_name: &str, fold: usize) -> Vec<(String, String)> {
    vec![
        ("dataset".into(), dataset_name.to_string()),
        ("strategy".into(), cfg.strategy.name().into()),
        ("tasks".into(), cfg.tasks.label()),
        ("seed".into(), cfg.seed.to_string()),
        ("fold".into(), fold.to_string()),
        ("folds".into(), cfg.folds.to_string()),
        ("stratify_folds".into(), cfg.stratify_folds.to_string()),
        ("config_hash".into(), format!("{:016x}", cfg.config_hash())),
    ]
}

pub fn curve_csv(curve: &[CurvePoint], hash: u64, seed: u64) -> String {
    let mut out = provenance_line(hash, seed);
    out.push_str("phase,epoch,gc_loss,nc_loss,lp_loss,val_metric,wall_time_s\n");
    for point in curve {
        let cell = |task: Task| -> String {
            point
                .train_losses
                .iter()
                .find(|(t, _)| *t == task)
                .map(|(_, v)| format!("{v:.6}"))
                .unwrap_or_default()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.3}",
            point.phase,
            point.epoch,
            cell(Task::Gc),
            cell(Task::Nc),
            cell(Task::Lp),
            point.val_metric,
            point.wall_time_s
        );
    }
    out
}

fn train_selected_folds(
    dataset: &GraphDataset,
    folds: &[FoldSplit],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<(usize, TrainOutcome)>> {
    exec::try_par_map(folds, |fold| {
        let outcome = train(dataset, fold, model_cfg, train_cfg)?;
        Ok((fold.fold_index, outcome))
    })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    let model_cfg = cfg.model_config(&dataset);
    let train_cfg = cfg.train_config();
    train_cfg.validate(&dataset)?;
    let all_folds = make_folds_opts(&dataset, cfg.folds, cfg.seed, cfg.stratify_folds)?;
    let selected: Vec<FoldSplit> = cfg
        .selected_folds()?
        .into_iter()
        .map(|i| all_folds[i].clone())
        .collect();

    fs::create_dir_all(out)?;
    fs::write(out.join("config_snapshot.cfg"), cfg.canonical())?;
    let hash = cfg.config_hash();

    let outcomes = train_selected_folds(&dataset, &selected, &model_cfg, &train_cfg)?;
    for (fold, outcome) in &outcomes {
        let dir = fold_dir(out, *fold);
        fs::create_dir_all(&dir)?;
        save_checkpoint(
            &dir.join("checkpoint.txt"),
            &model_cfg,
            &outcome.params,
            &checkpoint_meta(cfg, &dataset.name, *fold),
        )?;
        fs::write(dir.join("curve.csv"), curve_csv(&outcome.curve, hash, cfg.seed))?;
        for warning in &outcome.warnings {
            eprintln!("fold {fold}: {warning}");
        }
        println!(
            "fold {fold}: best val {:.4} after {} evaluations",
            outcome.best_val,
            outcome.curve.len()
        );
    }
    println!("wrote {} fold checkpoint(s) under {}", outcomes.len(), out.display());
    Ok(())
}

fn parse_eval_mode(probe: &str) -> Result<EvalMode> {
    if probe.trim().eq_ignore_ascii_case("head") {
        Ok(EvalMode::Head)
    } else {
        Ok(EvalMode::Probe(ProbeKind::parse(probe)?))
    }
}

fn meta_value(meta: &std::collections::BTreeMap<String, String>, key: &str) -> Result<String> {
    meta.get(key)
        .cloned()
        .ok_or_else(|| Error::Integrity(format!("checkpoint missing meta key {key}")))
}

/// Probes one checkpoint file; fold geometry is reconstructed from the
/// checkpoint's metadata so the probe sees exactly the training-time splits.
fn probe_checkpoint(
    checkpoint: &Path,
    dataset: &GraphDataset,
    probe: EvalMode,
    eval_tasks: Option<&[Task]>,
    experiment: &str,
) -> Result<Vec<MetricRow>> {
    let (model_cfg, params, meta) = load_checkpoint(checkpoint)?;
    let strategy = StrategyKind::parse(&meta_value(&meta, "strategy")?)?;
    let tasks = TaskSet::parse(&meta_value(&meta, "tasks")?)?;
    let seed: u64 = meta_value(&meta, "seed")?
        .parse()
        .map_err(|_| Error::Integrity("bad seed in checkpoint meta".into()))?;
    let fold_index: usize = meta_value(&meta, "fold")?
        .parse()
        .map_err(|_| Error::Integrity("bad fold in checkpoint meta".into()))?;
    let folds: usize = meta_value(&meta, "folds")?
        .parse()
        .map_err(|_| Error::Integrity("bad folds in checkpoint meta".into()))?;
    let stratify = meta_value(&meta, "stratify_folds")? == "true";
    let trained_dataset = meta_value(&meta, "dataset")?;
    if trained_dataset != dataset.name {
        return Err(Error::Argument(format!(
            "checkpoint was trained on {trained_dataset:?} but the dataset is {:?}",
            dataset.name
        )));
    }

    let all_folds = make_folds_opts(dataset, folds, seed, stratify)?;
    let fold = all_folds
        .get(fold_index)
        .ok_or_else(|| Error::Integrity(format!("fold {fold_index} out of range")))?;

    let mut train_cfg = TrainConfig::new(strategy, tasks);
    train_cfg.seed = seed;
    let tasks_vec: Vec<Task> = match eval_tasks {
        Some(ts) => ts.to_vec(),
        None => tasks.iter().collect(),
    };
    score_params(
        dataset,
        fold,
        &model_cfg,
        &train_cfg,
        &params,
        &tasks_vec,
        probe,
        experiment,
        fold_index,
    )
}

fn find_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        if path.is_dir() {
            let ckpt = path.join("checkpoint.txt");
            if ckpt.is_file() {
                out.push(ckpt);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Format(format!(
            "no fold_*/checkpoint.txt under {}",
            run_dir.display()
        )));
    }
    Ok(out)
}

pub fn cmd_probe(
    cfg: &RunConfig,
    run_dir: Option<&Path>,
    checkpoints: &[PathBuf],
    probe: &str,
    eval_tasks: Option<TaskSet>,
    out: &Path,
) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    let mode = parse_eval_mode(probe)?;
    let mut files = checkpoints.to_vec();
    if let Some(dir) = run_dir {
        files.extend(find_checkpoints(dir)?);
    }
    if files.is_empty() {
        return Err(Error::Argument(
            "probe needs --run or at least one --checkpoint".into(),
        ));
    }
    files.sort();
    let tasks_vec: Option<Vec<Task>> = eval_tasks.map(|ts| ts.iter().collect());

    let mut rows = Vec::new();
    for file in &files {
        rows.extend(probe_checkpoint(
            file,
            &dataset,
            mode,
            tasks_vec.as_deref(),
            "main",
        )?);
    }

    let canonical = format!(
        "probe dataset={} mode={} files={}\n{}",
        dataset.name,
        mode.name(),
        files.len(),
        cfg.canonical()
    );
    let hash = config_hash(&canonical);
    fs::create_dir_all(out)?;
    write_rows(&out.join("metrics"), &rows, hash, cfg.seed)?;
    print_row_summary(&rows);
    println!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

pub fn cmd_transfer(
    cfg: &RunConfig,
    eval_task: Task,
    probe: &str,
    out: &Path,
) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    let model_cfg = cfg.model_config(&dataset);
    let train_cfg = cfg.train_config();
    train_cfg.validate(&dataset)?;
    let mode = parse_eval_mode(probe)?;
    let all_folds = make_folds_opts(&dataset, cfg.folds, cfg.seed, cfg.stratify_folds)?;
    let selected: Vec<FoldSplit> = cfg
        .selected_folds()?
        .into_iter()
        .map(|i| all_folds[i].clone())
        .collect();

    fs::create_dir_all(out)?;
    let canonical = format!(
        "transfer eval_task={} probe={}\n{}",
        eval_task.name(),
        mode.name(),
        cfg.canonical()
    );
    fs::write(out.join("config_snapshot.cfg"), &canonical)?;
    let hash = config_hash(&canonical);

    let outcomes = train_selected_folds(&dataset, &selected, &model_cfg, &train_cfg)?;
    let mut rows = Vec::new();
    for ((fold_index, outcome), fold) in outcomes.iter().zip(&selected) {
        let dir = fold_dir(&out.join("source"), *fold_index);
        fs::create_dir_all(&dir)?;
        save_checkpoint(
            &dir.join("checkpoint.txt"),
            &model_cfg,
            &outcome.params,
            &checkpoint_meta(cfg, &dataset.name, *fold_index),
        )?;
        rows.extend(score_params(
            &dataset,
            fold,
            &model_cfg,
            &train_cfg,
            &outcome.params,
            &[eval_task],
            mode,
            "transfer",
            *fold_index,
        )?);
    }
    write_rows(&out.join("metrics"), &rows, hash, cfg.seed)?;
    print_row_summary(&rows);
    println!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

pub fn cmd_report(results: &Path, out: &Path) -> Result<()> {
    let rows = collect_rows(results)?;
    if rows.is_empty() {
        return Err(Error::Format(format!(
            "no metrics JSON files under {}",
            results.display()
        )));
    }
    // hash the inputs so reruns over identical results are byte-identical
    let canonical = report::rows_to_csv(&rows, 0, 0);
    let hash = config_hash(&canonical);
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.csv"), report::summary_csv(&rows, hash, 0))?;
    fs::write(out.join("q1_single_task.csv"), report::q1_csv(&rows, hash, 0))?;
    fs::write(out.join("delta_m.csv"), report::delta_m_csv(&rows, hash, 0)?)?;
    fs::write(out.join("transfer.csv"), report::transfer_csv(&rows, hash, 0))?;
    fs::write(
        out.join("fig1_drop_matrix.csv"),
        report::drop_matrix_csv(&rows, hash, 0),
    )?;
    println!(
        "aggregated {} rows into {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_synth(kind: &str, graphs: usize, seed: u64, out: &Path) -> Result<()> {
    match kind {
        "parser-fixture" => {
            synthetic::write_parser_fixture(out)?;
            println!("wrote parser fixture (dataset name: fixture) to {}", out.display());
        }
        "communities" => {
            let ds = synthetic::community_fixture(graphs, seed);
            write_tudataset(&ds, out)?;
            println!("wrote {} graphs (dataset name: {}) to {}", ds.len(), ds.name, out.display());
        }
        "enzymes-like" => {
            let ds = synthetic::sized_surrogate("ENZYMES-like", graphs, seed);
            write_tudataset(&ds, out)?;
            println!("wrote {} graphs (dataset name: {}) to {}", ds.len(), ds.name, out.display());
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown synth kind {other:?} (expected parser-fixture|communities|enzymes-like)"
            )))
        }
    }
    Ok(())
}

fn print_row_summary(rows: &[MetricRow]) {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.eval_task.clone(), row.metric.clone()))
            .or_default()
            .push(row.value);
    }
    for ((task, metric), values) in groups {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!(
            "{task} {metric}: {mean:.1} (over {} fold(s))",
            values.len()
        );
    }
}

