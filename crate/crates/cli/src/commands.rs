use std::collections::{HashMap, HashSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};

use recal::confidence::{score_trace, ScoreKind, ScoredSample};
use recal::correctness::{label_trace, LabeledSample};
use recal::local::{fit_local, grid_search, Dataset, Grid, LocalEnsemble, LocalHyper};
use recal::metrics::{reliability_table, EvaluationReport};
use recal::platt::{fit_global, GlobalCalibrator};
use recal::stats::{median_skewness, separation};
use recal::synth::synthetic_traces;
use recal::trace::{load_traces, validate_attention, write_traces, GenerationTrace};

use crate::io::{
    check_distinct, hash_split, index_by_id, json_bytes, jsonl_bytes, read_json, read_jsonl, report_join, write_atomic,
};
use crate::{Command, FitLocalArgs, GridSearchArgs, Outcome};

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Score { traces, kind, out } => score(&traces, kind.into(), &out),
        Command::Labels { traces, metric, out } => labels(&traces, metric.into(), &out),
        Command::FitGlobal { scores, labels, l2, out } => fit_global_cmd(&scores, &labels, l2, &out),
        Command::FitLocal(args) => fit_local_cmd(&args),
        Command::Apply { model, scores, traces, out } => apply(&model, &scores, traces.as_deref(), &out),
        Command::Eval { calibrated, labels, bins, out, csv } => eval(&calibrated, &labels, bins, &out, csv.as_deref()),
        Command::Stats { scores, labels, traces, out } => stats(&scores, &labels, traces.as_deref(), out.as_deref()),
        Command::GridSearch(args) => grid_search_cmd(&args),
        Command::Synth { n, seed, out } => {
            let mut buf = Vec::new();
            write_traces(&mut buf, &synthetic_traces(seed, n))?;
            write_atomic(&out, &buf)?;
            Ok(Outcome::Ok)
        }
    }
}

fn load(path: &Path) -> Result<Vec<GenerationTrace>> {
    load_traces(path).with_context(|| format!("cannot load traces from {}", path.display()))
}

fn score(traces_path: &Path, kind: ScoreKind, out: &Path) -> Result<Outcome> {
    check_distinct(&[traces_path], &[out])?;
    let traces = load(traces_path)?;
    let results: Vec<Result<ScoredSample, String>> = traces
        .par_iter()
        .map(|t| {
            if kind == ScoreKind::AttnW && t.attention.is_some() && !validate_attention(t) {
                return Err("attention is not causal and row-stochastic".to_string());
            }
            score_trace(t, kind)
                .map(|score| ScoredSample { id: t.id.clone(), kind, score })
                .map_err(|e| e.to_string())
        })
        .collect();
    let (records, skipped) = split_results(&traces, results);
    write_atomic(out, &jsonl_bytes(&records)?)?;
    log::info!("scored {} traces with {kind}", records.len());
    Ok(if skipped > 0 { Outcome::Partial } else { Outcome::Ok })
}

fn split_results<T>(traces: &[GenerationTrace], results: Vec<Result<T, String>>) -> (Vec<T>, usize) {
    let mut records = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for (t, r) in traces.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(reason) => {
                skipped += 1;
                log::warn!("skipping {}: {reason}", t.id);
                eprintln!("skipped {}: {reason}", t.id);
            }
        }
    }
    (records, skipped)
}

fn labels(traces_path: &Path, metric: recal::correctness::Metric, out: &Path) -> Result<Outcome> {
    check_distinct(&[traces_path], &[out])?;
    let traces = load(traces_path)?;
    let results: Vec<Result<LabeledSample, String>> = traces
        .par_iter()
        .map(|t| label_trace(t, metric).map_err(|e| e.to_string()))
        .collect();
    let (records, skipped) = split_results(&traces, results);
    write_atomic(out, &jsonl_bytes(&records)?)?;
    Ok(if skipped > 0 { Outcome::Partial } else { Outcome::Ok })
}

/// Score file contents, checked to hold a single score kind.
struct Scores {
    kind: ScoreKind,
    records: Vec<ScoredSample>,
}

fn read_scores(path: &Path) -> Result<Scores> {
    let records: Vec<ScoredSample> = read_jsonl(path)?;
    let kind = records.first().map(|r| r.kind).ok_or_else(|| anyhow!("{} holds no scores", path.display()))?;
    if let Some(other) = records.iter().find(|r| r.kind != kind) {
        bail!("{} mixes score kinds {kind} and {}", path.display(), other.kind);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.id.as_str())) {
        bail!("duplicate id {:?} in {}", dup.id, path.display());
    }
    Ok(Scores { kind, records })
}

fn read_labels(path: &Path) -> Result<HashMap<String, bool>> {
    let records: Vec<LabeledSample> = read_jsonl(path)?;
    let map = index_by_id(records, "labels", |r| r.id.as_str())?;
    Ok(map.into_iter().map(|(k, v)| (k, v.correct)).collect())
}

/// Scores joined with labels, in score-file order.
fn join_labels(scores: &Scores, labels: &HashMap<String, bool>) -> (Vec<String>, Vec<f64>, Vec<bool>) {
    let ids: Vec<&str> = scores.records.iter().map(|r| r.id.as_str()).collect();
    report_join("scores", &ids, "labels", &labels.keys().map(String::as_str).collect());
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for r in &scores.records {
        if let Some(&y) = labels.get(&r.id) {
            out.0.push(r.id.clone());
            out.1.push(r.score);
            out.2.push(y);
        }
    }
    out
}

/// Embedding per trace id; errors when any joined trace lacks one.
fn embeddings_for(ids: &[String], traces: &[GenerationTrace]) -> Result<(Vec<bool>, Vec<Vec<f64>>)> {
    let by_id: HashMap<&str, &GenerationTrace> = traces.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut keep = Vec::with_capacity(ids.len());
    let mut embeddings = Vec::new();
    for id in ids {
        match by_id.get(id.as_str()) {
            None => keep.push(false),
            Some(t) => {
                let e = t.embedding.clone().ok_or_else(|| anyhow!("embeddings required: trace {id} has none"))?;
                keep.push(true);
                embeddings.push(e);
            }
        }
    }
    let dropped = keep.iter().filter(|k| !**k).count();
    if dropped > 0 {
        log::warn!("join with traces: dropped {dropped} records without a trace");
    }
    Ok((keep, embeddings))
}

fn filter<T: Clone>(values: &[T], keep: &[bool]) -> Vec<T> {
    values.iter().zip(keep).filter(|(_, k)| **k).map(|(v, _)| v.clone()).collect()
}

fn model_value(kind: &str, score_kind: ScoreKind, body: Value) -> Result<Value> {
    let Value::Object(fields) = body else { bail!("model body is not an object") };
    let mut obj = Map::new();
    obj.insert("kind".into(), Value::from(kind));
    obj.insert("score_kind".into(), serde_json::to_value(score_kind)?);
    obj.extend(fields);
    Ok(Value::Object(obj))
}

fn fit_global_cmd(scores_path: &Path, labels_path: &Path, l2: f64, out: &Path) -> Result<Outcome> {
    check_distinct(&[scores_path, labels_path], &[out])?;
    let scores = read_scores(scores_path)?;
    let labels = read_labels(labels_path)?;
    let (_, s, y) = join_labels(&scores, &labels);
    let cal = fit_global(&s, &y, l2)?;
    if cal.is_degenerate() {
        log::warn!("training labels are single-class; writing a constant calibrator");
    }
    let value = model_value("global", scores.kind, serde_json::to_value(&cal)?)?;
    write_atomic(out, &json_bytes(&value)?)?;
    Ok(Outcome::Ok)
}

/// Joined training inputs for local calibration.
fn local_dataset(traces_path: &Path, scores_path: &Path, labels_path: &Path) -> Result<(ScoreKind, Vec<String>, Dataset)> {
    let traces = load(traces_path)?;
    let scores = read_scores(scores_path)?;
    let labels = read_labels(labels_path)?;
    let (ids, s, y) = join_labels(&scores, &labels);
    let (keep, embeddings) = embeddings_for(&ids, &traces)?;
    let data = Dataset { scores: filter(&s, &keep), labels: filter(&y, &keep), embeddings };
    Ok((scores.kind, filter(&ids, &keep), data))
}

fn fit_local_cmd(args: &FitLocalArgs) -> Result<Outcome> {
    check_distinct(&[&args.traces, &args.scores, &args.labels], &[&args.out])?;
    let (kind, _, data) = local_dataset(&args.traces, &args.scores, &args.labels)?;
    let hyper = LocalHyper {
        min_cluster_size: args.min_cluster_size,
        min_samples: args.min_samples,
        backoff: args.backoff.into(),
        n: args.n,
        l2: args.l2,
    };
    let ens = fit_local(&data, hyper)?;
    log::info!(
        "{} clusters, {} with local calibrators, {} backed off",
        ens.clusters.n_clusters,
        ens.per_cluster.len(),
        ens.backoff_clusters.len()
    );
    let value = model_value("local", kind, serde_json::to_value(&ens)?)?;
    write_atomic(&args.out, &json_bytes(&value)?)?;
    Ok(Outcome::Ok)
}

fn apply(model_path: &Path, scores_path: &Path, traces_path: Option<&Path>, out: &Path) -> Result<Outcome> {
    let mut inputs = vec![model_path, scores_path];
    inputs.extend(traces_path);
    check_distinct(&inputs, &[out])?;
    let mut model: Map<String, Value> = read_json(model_path)?;
    let kind = model.remove("kind").and_then(|v| v.as_str().map(str::to_string));
    let score_kind: ScoreKind = serde_json::from_value(model.remove("score_kind").ok_or_else(|| anyhow!("model has no score_kind"))?)
        .context("invalid score_kind in model")?;
    let scores = read_scores(scores_path)?;
    if scores.kind != score_kind {
        bail!("model was fitted on {score_kind} scores but the input holds {}", scores.kind);
    }

    let records: Vec<ScoredSample> = match kind.as_deref() {
        Some("global") => {
            let cal: GlobalCalibrator = serde_json::from_value(Value::Object(model)).context("invalid global model")?;
            scores
                .records
                .iter()
                .map(|r| ScoredSample { id: r.id.clone(), kind: score_kind, score: cal.predict(r.score) })
                .collect()
        }
        Some("local") => {
            let ens: LocalEnsemble = serde_json::from_value(Value::Object(model)).context("invalid local model")?;
            let traces_path = traces_path.ok_or_else(|| anyhow!("embeddings required: pass --traces for a local model"))?;
            let traces = load(traces_path)?;
            let ids: Vec<String> = scores.records.iter().map(|r| r.id.clone()).collect();
            let (keep, embeddings) = embeddings_for(&ids, &traces)?;
            let kept: Vec<&ScoredSample> = scores.records.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r).collect();
            let s: Vec<f64> = kept.iter().map(|r| r.score).collect();
            let preds = ens.predict_many(&s, &embeddings)?;
            kept.iter()
                .zip(preds)
                .map(|(r, p)| ScoredSample { id: r.id.clone(), kind: score_kind, score: p })
                .collect()
        }
        other => bail!("unknown model kind {other:?}"),
    };
    write_atomic(out, &jsonl_bytes(&records)?)?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a EvaluationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
}

fn eval(calibrated: &Path, labels_path: &Path, bins: usize, out: &Path, csv: Option<&Path>) -> Result<Outcome> {
    let mut outputs = vec![out];
    outputs.extend(csv);
    check_distinct(&[calibrated, labels_path], &outputs)?;
    let scores = read_scores(calibrated)?;
    let labels = read_labels(labels_path)?;
    let (_, p, y) = join_labels(&scores, &labels);
    let report = reliability_table(&p, &y, bins)?;
    let note = report
        .degenerate
        .then_some("single-bin collapse: ece and brier are ignored per protocol");
    write_atomic(out, &json_bytes(&EvalOutput { report: &report, note })?)?;
    if let Some(csv) = csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
    }
    if report.degenerate {
        log::warn!("all predictions fall in one bin; results are ignored per protocol");
        return Ok(Outcome::Degenerate);
    }
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct StatsOutput {
    score_kind: ScoreKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    median_skewness: Option<f64>,
    w1: f64,
    tau_b: f64,
    n_correct: usize,
    n_incorrect: usize,
}

fn stats(scores_path: &Path, labels_path: &Path, traces_path: Option<&Path>, out: Option<&Path>) -> Result<Outcome> {
    let mut inputs = vec![scores_path, labels_path];
    inputs.extend(traces_path);
    if let Some(out) = out {
        check_distinct(&inputs, &[out])?;
    }
    let scores = read_scores(scores_path)?;
    let labels = read_labels(labels_path)?;
    let (ids, s, y) = join_labels(&scores, &labels);
    let sep = separation(&s, &y)?;
    let median_skewness = match traces_path {
        None => None,
        Some(path) => {
            let traces = load(path)?;
            let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
            let seqs = traces.iter().filter(|t| wanted.contains(t.id.as_str())).map(|t| t.token_probs.as_slice());
            Some(median_skewness(seqs)?)
        }
    };
    let output = StatsOutput {
        score_kind: scores.kind,
        median_skewness,
        w1: sep.w1,
        tau_b: sep.tau_b,
        n_correct: sep.n_correct,
        n_incorrect: sep.n_incorrect,
    };
    let bytes = json_bytes(&output)?;
    match out {
        Some(path) => write_atomic(path, &bytes)?,
        None => print!("{}", String::from_utf8(bytes)?),
    }
    Ok(Outcome::Ok)
}

fn grid_search_cmd(args: &GridSearchArgs) -> Result<Outcome> {
    let mut inputs = vec![args.traces.as_path(), args.scores.as_path(), args.labels.as_path()];
    inputs.extend(args.valid_traces.as_deref());
    inputs.extend(args.valid_scores.as_deref());
    inputs.extend(args.valid_labels.as_deref());
    let mut outputs = vec![args.out.as_path()];
    outputs.extend(args.model_out.as_deref());
    check_distinct(&inputs, &outputs)?;

    let (kind, ids, data) = local_dataset(&args.traces, &args.scores, &args.labels)?;
    let (train, valid) = match (&args.valid_traces, &args.valid_scores, &args.valid_labels) {
        (Some(t), Some(s), Some(l)) => {
            let (vkind, _, valid) = local_dataset(t, s, l)?;
            if vkind != kind {
                bail!("validation scores are {vkind} but training scores are {kind}");
            }
            (data, valid)
        }
        _ => {
            if !(0.0..1.0).contains(&args.valid_frac) || args.valid_frac == 0.0 {
                bail!("--valid-frac must be in (0, 1)");
            }
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let (train_idx, valid_idx) = hash_split(&refs, args.valid_frac);
            let pick = |idx: &[usize]| Dataset {
                scores: idx.iter().map(|&i| data.scores[i]).collect(),
                labels: idx.iter().map(|&i| data.labels[i]).collect(),
                embeddings: idx.iter().map(|&i| data.embeddings[i].clone()).collect(),
            };
            (pick(&train_idx), pick(&valid_idx))
        }
    };
    log::info!("grid search: {} training and {} validation samples", train.len(), valid.len());

    let grid = Grid {
        min_cluster_size: args.min_cluster_sizes.clone(),
        min_samples: args.min_samples.clone(),
        backoff: args.backoffs.iter().map(|&b| b.into()).collect(),
        n: args.n,
        l2: args.l2,
        bins: args.bins,
    };
    let result = grid_search(&train, &valid, &grid)?;
    let skipped = result.table.iter().filter(|e| e.skipped.is_some()).count();
    if skipped > 0 {
        log::warn!("{skipped} grid combinations skipped");
    }
    let value = model_value("grid_search", kind, serde_json::to_value(&result)?)?;
    write_atomic(&args.out, &json_bytes(&value)?)?;
    if let Some(model_out) = &args.model_out {
        let ens = fit_local(&train, result.best_hyper)?;
        let value = model_value("local", kind, serde_json::to_value(&ens)?)?;
        write_atomic(model_out, &json_bytes(&value)?)?;
    }
    Ok(Outcome::Ok)
}
