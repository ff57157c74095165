use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use crowd_prefrl::aggregate::{label_error_where_defined, majority_vote, sml_labels, write_weights_csv};
use crowd_prefrl::crowd::{label_matrix_with, sample_crowd, Label, LabelMatrix, MinoritySpec, Query};
use crowd_prefrl::env::{scripted_pool, write_segments_jsonl, Segment};
use crowd_prefrl::exec::Exec;
use crowd_prefrl::experiment::{high_spread_crowd, pool_queries, probe_queries, run_cluster_scenario, run_seeds, sweep, write_sweep_csv};
use crowd_prefrl::policy::{crowd_prefrl_run, trimmed_mean_eval, ExperimentConfig, LabelSource, RunLog};
use crowd_prefrl::seed::{self, stream};

use crate::config::{ConfigError, Resolved};
use crate::output::OutputDir;
use crate::Command;

pub fn dispatch(command: Command, resolved: &Resolved, out: &Path, exec: Exec) -> Result<()> {
    validate(command, resolved)?;
    let mut dir = OutputDir::create(out)?;
    let config_toml = resolved.to_toml()?;
    if command == Command::Train {
        guard_resume(&dir, &config_toml)?;
    }
    dir.write_str("config.toml", &config_toml)?;
    match command {
        Command::Simulate => simulate(resolved, &mut dir, exec)?,
        Command::Aggregate => aggregate(resolved, &mut dir)?,
        Command::Cluster => cluster(resolved, &mut dir, exec)?,
        Command::Sweep => run_sweep(resolved, &mut dir, exec)?,
        Command::Train => train(resolved, &mut dir, exec)?,
        Command::Eval => eval(resolved, &mut dir)?,
    }
    let root = dir.root().to_path_buf();
    dir.finish(command.name(), resolved)?;
    info!("wrote {}", root.display());
    println!("{}", root.display());
    Ok(())
}

/// Semantic checks for the sections `command` uses, reported as config errors.
fn validate(command: Command, resolved: &Resolved) -> Result<()> {
    let c = &resolved.config;
    let checked = match command {
        Command::Simulate => {
            let s = &c.simulate;
            if s.m == 0 || s.n_queries == 0 || s.segment_length == 0 {
                Err("simulate: m, n_queries and segment_length must be positive".to_string())
            } else if s.minority > s.m {
                Err("simulate: minority cannot exceed m".to_string())
            } else if s.source.pool().is_some() && s.pool_size < 2 {
                Err("simulate: pool_size must be at least 2".to_string())
            } else {
                c.simulate.env.validate().and(c.simulate.ranges.validate()).map_err(|e| format!("simulate: {e}"))
            }
        }
        Command::Aggregate if c.aggregate.labels.is_none() => Err("aggregate: `aggregate.labels` is required".to_string()),
        Command::Aggregate => Ok(()),
        Command::Cluster => c.cluster.validate().map_err(|e| format!("cluster: {e}")),
        Command::Sweep => c.sweep.validate().map_err(|e| format!("sweep: {e}")),
        Command::Train => {
            let t = &c.train;
            if t.runs == 0 || t.methods.is_empty() || t.crowd_size == 0 || t.crowd_candidates == 0 {
                Err("train: runs, methods, crowd_size and crowd_candidates must be non-empty".to_string())
            } else {
                t.experiment.validate().and(t.probe().validate()).map_err(|e| format!("train: {e}"))
            }
        }
        Command::Eval => Ok(()),
    };
    checked.map_err(|m| ConfigError(m).into())
}

fn truth_column(queries: &[Query], objective: usize) -> Result<Vec<Option<Label>>> {
    Ok(queries.iter().map(|q| q.truth(objective)).collect::<Result<Vec<_>, _>>()?)
}

fn write_truth_csv<W: Write>(w: W, truth: &[Option<Label>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["query_id", "truth"])?;
    for (q, t) in truth.iter().enumerate() {
        out.write_record([q.to_string(), t.map_or(String::new(), |l| l.to_string())])?;
    }
    out.flush()?;
    Ok(())
}

fn read_truth_csv(path: &Path) -> Result<BTreeMap<usize, Option<Label>>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id: usize = rec.get(0).unwrap_or("").trim().parse().context("bad query_id in truth CSV")?;
        let t = match rec.get(1).map(str::trim) {
            None | Some("") => None,
            Some(v) => Some(v.parse::<Label>().with_context(|| format!("bad truth value {v:?}"))?),
        };
        out.insert(id, t);
    }
    Ok(out)
}

fn simulate(resolved: &Resolved, dir: &mut OutputDir, exec: Exec) -> Result<()> {
    let s = &resolved.config.simulate;
    let master = resolved.config.seed;
    let minority = (s.minority > 0).then_some(MinoritySpec { count: s.minority, objective_id: 1 });
    let crowd = sample_crowd(s.m, &s.ranges, minority, &mut seed::derived_rng(master, &[stream::CROWD]))?;
    let queries = match s.source.pool() {
        None => probe_queries(&s.env, s.segment_length, s.n_queries, &mut seed::derived_rng(master, &[stream::QUERIES]))?,
        Some(kind) => {
            let pool = scripted_pool(kind, s.pool_size, s.segment_length, &mut seed::derived_rng(master, &[stream::POOL]))?;
            pool_queries(&pool, s.n_queries, &mut seed::derived_rng(master, &[stream::QUERIES]))?
        }
    };
    let matrix = label_matrix_with(&crowd, &queries, &mut seed::derived_rng(master, &[stream::LABELS]), exec)?;
    let segments: Vec<Segment> = queries.iter().flat_map(|q| [q.a.clone(), q.b.clone()]).collect();

    dir.write_str("crowd.json", &(crowd.to_json()? + "\n"))?;
    dir.write("labels.csv", |w| Ok(matrix.write_csv(w)?))?;
    dir.write("truth.csv", |w| write_truth_csv(w, &truth_column(&queries, 0)?))?;
    dir.write("segments.jsonl", |w| Ok(write_segments_jsonl(w, &segments)?))?;
    info!("{} users labelled {} queries", crowd.len(), queries.len());
    Ok(())
}

#[derive(Serialize)]
struct AggregateErrors {
    maj_error: Option<f64>,
    sml_error: Option<f64>,
    user_errors: BTreeMap<usize, Option<f64>>,
}

fn aggregate(resolved: &Resolved, dir: &mut OutputDir) -> Result<()> {
    let a = &resolved.config.aggregate;
    let labels_path = resolved.resolve_path(a.labels.as_deref().expect("validated"));
    let file = fs::File::open(&labels_path).with_context(|| format!("opening {}", labels_path.display()))?;
    let matrix = LabelMatrix::read_csv(file).with_context(|| format!("reading {}", labels_path.display()))?;
    let maj = majority_vote(&matrix)?;
    let sml = sml_labels(&matrix)?;
    dir.write_str("maj.json", &(maj.to_json()? + "\n"))?;
    dir.write_str("sml.json", &(sml.to_json()? + "\n"))?;
    let weights = sml.weights.clone().unwrap_or_default();
    dir.write("weights.csv", |w| Ok(write_weights_csv(w, matrix.user_ids(), &weights)?))?;

    if let Some(truth_path) = &a.truth {
        let by_id = read_truth_csv(&resolved.resolve_path(truth_path))?;
        let truth = matrix
            .query_ids()
            .iter()
            .map(|q| by_id.get(q).copied().with_context(|| format!("truth CSV has no query {q}")))
            .collect::<Result<Vec<_>>>()?;
        let errors = AggregateErrors {
            maj_error: label_error_where_defined(&maj.labels, &truth)?,
            sml_error: label_error_where_defined(&sml.labels, &truth)?,
            user_errors: matrix
                .user_ids()
                .iter()
                .zip(matrix.rows())
                .map(|(&u, row)| Ok((u, label_error_where_defined(row, &truth)?)))
                .collect::<Result<_>>()?,
        };
        println!("MAJ error {:?}  SML error {:?}", errors.maj_error, errors.sml_error);
        dir.write_str("errors.json", &(serde_json::to_string_pretty(&errors)? + "\n"))?;
    }
    Ok(())
}

fn cluster(resolved: &Resolved, dir: &mut OutputDir, exec: Exec) -> Result<()> {
    let outcome = run_cluster_scenario(&resolved.config.cluster, resolved.config.seed, exec)?;
    let ids: Vec<usize> = (0..outcome.weights.len()).collect();
    dir.write_str("cluster.json", &(outcome.to_json()? + "\n"))?;
    dir.write("weights.csv", |w| Ok(write_weights_csv(w, &ids, &outcome.weights)?))?;
    println!(
        "best k {}  assignment accuracy {:.3}  pool correlation {:.3}",
        outcome.report.best_k, outcome.assignment_accuracy, outcome.pool_correlation
    );
    Ok(())
}

fn run_sweep(resolved: &Resolved, dir: &mut OutputDir, exec: Exec) -> Result<()> {
    let rows = sweep(&resolved.config.sweep, resolved.config.seed, exec)?;
    dir.write("sweep.csv", |w| Ok(write_sweep_csv(w, &rows)?))?;
    for &m in &resolved.config.sweep.sizes {
        let of_size: Vec<_> = rows.iter().filter(|r| r.m == m).collect();
        let wins = of_size.iter().filter(|r| r.sml_error <= r.maj_error).count();
        println!("m={m:<3} SML no worse than MAJ in {wins}/{} crowds", of_size.len());
    }
    Ok(())
}

/// Refuses to resume into a directory produced by a different config.
fn guard_resume(dir: &OutputDir, config_toml: &str) -> Result<()> {
    let path = dir.path("config.toml");
    if path.exists() && fs::read_to_string(&path)? != config_toml {
        bail!(ConfigError(format!("{} holds results for a different config", dir.root().display())));
    }
    Ok(())
}

fn run_dir(method: LabelSource, k: usize) -> String {
    format!("runs/{}_seed{k}", method.name())
}

fn load_run(path: &Path) -> Result<RunLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_run(root: &Path, rel: &str, log: &RunLog) -> Result<()> {
    let run = root.join(rel);
    fs::create_dir_all(&run)?;
    log.write_feedback_csv(fs::File::create(run.join("feedback.csv"))?)?;
    log.write_eval_csv(fs::File::create(run.join("eval.csv"))?)?;
    // run.json marks the run complete, so it goes last.
    let tmp = run.join("run.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(log)? + "\n")?;
    fs::rename(tmp, run.join("run.json"))?;
    Ok(())
}

fn train(resolved: &Resolved, dir: &mut OutputDir, exec: Exec) -> Result<()> {
    let t = &resolved.config.train;
    let master = resolved.config.seed;
    let selected = high_spread_crowd(&t.probe(), t.crowd_size, t.crowd_candidates, master, exec)?;
    let ev = &selected.evaluation;
    info!(
        "crowd #{} of {}: user error std {:.3}, probe MAJ {:.3}, SML {:.3}",
        selected.index, t.crowd_candidates, ev.user_error_std(), ev.maj_error, ev.sml_error
    );
    dir.write_str("crowd.json", &(selected.crowd.to_json()? + "\n"))?;
    let probe = serde_json::json!({
        "index": selected.index,
        "user_error_std": ev.user_error_std(),
        "maj_error": ev.maj_error,
        "sml_error": ev.sml_error,
        "user_errors": ev.user_errors,
        "weights": ev.weights,
    });
    dir.write_str("crowd_probe.json", &(serde_json::to_string_pretty(&probe)? + "\n"))?;

    let seeds = run_seeds(master, t.runs);
    let jobs: Vec<(LabelSource, usize)> = t.methods.iter().flat_map(|&m| (0..t.runs).map(move |k| (m, k))).collect();
    let root = dir.root().to_path_buf();
    let pending: Vec<(LabelSource, usize)> =
        jobs.iter().copied().filter(|&(m, k)| load_run(&root.join(run_dir(m, k)).join("run.json")).is_err()).collect();
    if pending.len() < jobs.len() {
        info!("resuming: {} of {} runs already complete", jobs.len() - pending.len(), jobs.len());
    }
    exec.try_map(pending.len(), |j| {
        let (method, k) = pending[j];
        let cfg = ExperimentConfig { method, ..t.experiment.clone() };
        let log = crowd_prefrl_run(&cfg, &selected.crowd, seeds[k]).with_context(|| format!("{} run {k}", method.name()))?;
        write_run(&root, &run_dir(method, k), &log)?;
        info!("{} run {k}: final return {:.3}", method.name(), log.final_return);
        Ok::<_, anyhow::Error>(())
    })?;

    let mut logs = Vec::with_capacity(jobs.len());
    for &(m, k) in &jobs {
        let rel = run_dir(m, k);
        for file in ["feedback.csv", "eval.csv", "run.json"] {
            dir.track(&format!("{rel}/{file}"));
        }
        logs.push(load_run(&root.join(&rel).join("run.json"))?);
    }
    write_summary(dir, &logs)
}

#[derive(Serialize)]
struct MethodSummary {
    runs: usize,
    final_returns: Vec<f64>,
    /// Mean after dropping the two best and two worst runs; needs 5 runs.
    trimmed_mean: Option<f64>,
    trimmed_se: Option<f64>,
    /// Across runs, mean fraction of sessions where SML was no worse than MAJ.
    sml_no_worse_fraction: Option<f64>,
}

fn summarize(logs: &[RunLog]) -> Result<BTreeMap<&'static str, MethodSummary>> {
    let mut by_method: BTreeMap<&'static str, Vec<&RunLog>> = BTreeMap::new();
    for log in logs {
        by_method.entry(log.method.name()).or_default().push(log);
    }
    by_method
        .into_iter()
        .map(|(name, runs)| {
            let final_returns: Vec<f64> = runs.iter().map(|r| r.final_return).collect();
            let trimmed = if final_returns.len() >= 5 { Some(trimmed_mean_eval(&final_returns)?) } else { None };
            let fractions: Vec<f64> = runs.iter().filter_map(|r| r.sml_no_worse_fraction()).collect();
            let summary = MethodSummary {
                runs: runs.len(),
                trimmed_mean: trimmed.map(|t| t.0),
                trimmed_se: trimmed.map(|t| t.1),
                sml_no_worse_fraction: (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
                final_returns,
            };
            Ok((name, summary))
        })
        .collect()
}

fn write_summary(dir: &mut OutputDir, logs: &[RunLog]) -> Result<()> {
    let summary = summarize(logs)?;
    for (name, s) in &summary {
        match (s.trimmed_mean, s.trimmed_se) {
            (Some(m), Some(se)) => println!("{name:<7} trimmed mean {m:.3} ± {se:.3} over {} runs", s.runs),
            _ => println!("{name:<7} {} runs (trimmed mean needs 5)", s.runs),
        }
    }
    dir.write_str("summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn eval(resolved: &Resolved, dir: &mut OutputDir) -> Result<()> {
    let source = match &resolved.config.eval.runs {
        Some(p) => resolved.resolve_path(p),
        None => dir.root().to_path_buf(),
    };
    let runs = source.join("runs");
    let mut entries: Vec<_> = fs::read_dir(&runs)
        .with_context(|| format!("no runs directory at {}", runs.display()))?
        .collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut logs = Vec::new();
    for entry in entries {
        let path = entry.path().join("run.json");
        if path.exists() {
            logs.push(load_run(&path)?);
        }
    }
    if logs.is_empty() {
        bail!("no completed runs under {}", runs.display());
    }
    write_summary(dir, &logs)
}
