//! Command implementations. Each writes its files under an output
//! directory and returns a JSON report that `main` prints.

use std::path::{Path, PathBuf};

use mclmr_core::backbone::EmbeddingSet;
use mclmr_core::contrast::TemperatureRule;
use mclmr_core::corpus::{split_leave_one_out, BehaviorSchema, SplitDataset};
use mclmr_core::eval::{
    entry_metrics, group_items, group_users, hr_ndcg, paired_t_test, rank_users, score_items,
    RankingResult,
};
use mclmr_core::model::{Ablation, ModelConfig};
use mclmr_core::scm::{verify_backdoor, Cardinalities};
use mclmr_core::synth::{generate_confounded, true_preference_metric, GroundTruth};
use mclmr_core::train::{
    estimate_cost, fit_with, grad_check, FitResult, GradCheckConfig, TrainingData, EARLY_STOP_K,
};
use serde_json::{json, Value};

use crate::config::{DataSource, RawConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{
    checkpoint_json, ground_truth_json, id_map_json, load_dataset, read_checkpoint, write_csv,
    write_interaction_files, write_json, write_meta, VERSION,
};

/// Stated in every metrics output.
pub const EVAL_NOTES: &[&str] = &[
    "full ranking over all items not seen under the target behavior in training",
    "ties are broken by ascending item id",
    "one held-out positive per user, so recall@K equals HR@K",
];

/// Train/test data for a run; `truth` is set for synthetic sources.
pub struct Prepared {
    pub data: TrainingData,
    pub truth: Option<GroundTruth>,
    pub warnings: Vec<String>,
}

pub fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let (ds, truth, warnings) = match &cfg.corpus.source {
        DataSource::Synth => {
            let (ds, gt) = generate_confounded(&cfg.synth)?;
            (ds, Some(gt), Vec::new())
        }
        DataSource::Files(paths) => {
            if paths.is_empty() {
                return Err(CliError::usage(
                    "[corpus] needs `files` or `data_dir` (or source = synth)",
                ));
            }
            let schema = BehaviorSchema::with_target(&cfg.corpus.behaviors, &cfg.corpus.target)
                .map_err(|e| CliError::usage(format!("[corpus] {e}")))?;
            let loaded = load_dataset(schema, paths)?;
            (loaded.dataset, None, loaded.warnings)
        }
    };
    let split = split_leave_one_out(&ds, cfg.corpus.split_seed);
    if split.num_test() == 0 {
        return Err(CliError::data(
            "no user has a target interaction to hold out",
        ));
    }
    Ok(Prepared {
        data: TrainingData::from_split(split),
        truth,
        warnings,
    })
}

/// Ranks every test user, splitting users across `workers` threads. The
/// result does not depend on the worker count.
pub fn rank_parallel(
    es: &EmbeddingSet,
    split: &SplitDataset,
    workers: usize,
) -> CliResult<RankingResult> {
    let t = split.train.target();
    let users: Vec<u32> = split.test_pairs().map(|(u, _)| u).collect();
    if users.is_empty() {
        return Err(mclmr_core::Error::NoTestPositives.into());
    }
    let scorer = |u: u32, out: &mut [f64]| score_items(es, t, u, out);
    if workers <= 1 {
        return Ok(RankingResult {
            entries: rank_users(split, &users, scorer),
        });
    }
    let chunk = users.len().div_ceil(workers);
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = users
            .chunks(chunk)
            .map(|c| s.spawn(move || rank_users(split, c, scorer)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ranking worker panicked"))
            .collect()
    });
    Ok(RankingResult {
        entries: parts.into_iter().flatten().collect(),
    })
}

/// Metrics of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `(k, hr, ndcg)` per configured cutoff.
    pub at_k: Vec<(usize, f64, f64)>,
    pub true_ndcg: Option<f64>,
}

pub fn evaluate(fit: &FitResult, prep: &Prepared, cfg: &RunConfig) -> CliResult<Evaluation> {
    let es = fit.model.embeddings(&prep.data.graph)?;
    let rr = rank_parallel(&es, &prep.data.split, cfg.workers)?;
    let at_k = cfg
        .eval
        .ks
        .iter()
        .map(|&k| {
            let (h, n) = hr_ndcg(&rr, k);
            (k, h, n)
        })
        .collect();
    let true_ndcg = match &prep.truth {
        Some(gt) => {
            let t = prep.data.split.train.target();
            Some(true_preference_metric(
                |u, out| score_items(&es, t, u, out),
                gt,
                cfg.eval.true_k,
                cfg.eval.true_relevant,
                &prep.data.split.train,
            )?)
        }
        None => None,
    };
    Ok(Evaluation { at_k, true_ndcg })
}

pub fn train_model(prep: &Prepared, model: &ModelConfig, cfg: &RunConfig) -> CliResult<FitResult> {
    let split = &prep.data.split;
    fit_with(&prep.data, model, &cfg.train, |_, es| {
        let rr = rank_parallel(es, split, cfg.workers)
            .map_err(|e| mclmr_core::Error::InvalidInput(e.to_string()))?;
        Ok(hr_ndcg(&rr, EARLY_STOP_K).0)
    })
    .map_err(CliError::from)
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn metric_header(cfg: &RunConfig) -> Vec<String> {
    let mut h = Vec::new();
    for &k in &cfg.eval.ks {
        h.push(format!("hr@{k}"));
        h.push(format!("ndcg@{k}"));
    }
    h.push(format!("true_ndcg@{}", cfg.eval.true_k));
    h
}

fn metric_cells(ev: &Evaluation) -> Vec<String> {
    let mut c = Vec::new();
    for &(_, h, n) in &ev.at_k {
        c.push(fmt(h));
        c.push(fmt(n));
    }
    c.push(ev.true_ndcg.map(fmt).unwrap_or_default());
    c
}

fn metrics_json(ev: &Evaluation) -> Value {
    let at_k: Vec<Value> = ev
        .at_k
        .iter()
        .map(|&(k, h, n)| json!({ "k": k, "hr": h, "recall": h, "ndcg": n }))
        .collect();
    json!({ "at_k": at_k, "true_ndcg": ev.true_ndcg })
}

fn dataset_summary(prep: &Prepared) -> Value {
    let ds = &prep.data.split.train;
    let edges: Vec<Value> = (0..ds.num_behaviors())
        .map(|k| json!({ "behavior": ds.schema().names()[k], "train_edges": ds.num_edges(k) }))
        .collect();
    json!({
        "users": ds.num_users(),
        "items": ds.num_items(),
        "target": ds.schema().names()[ds.target()],
        "behaviors": edges,
        "test_positives": prep.data.split.num_test(),
    })
}

pub fn cmd_ingest(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let DataSource::Files(paths) = &cfg.corpus.source else {
        return Err(CliError::usage(
            "ingest reads interaction files; set [corpus] source = files",
        ));
    };
    if paths.is_empty() {
        return Err(CliError::usage("[corpus] needs `files` or `data_dir`"));
    }
    let schema = BehaviorSchema::with_target(&cfg.corpus.behaviors, &cfg.corpus.target)
        .map_err(|e| CliError::usage(format!("[corpus] {e}")))?;
    let loaded = load_dataset(schema, paths)?;
    let ds = &loaded.dataset;
    write_json(
        &out.join("id_map.json"),
        &id_map_json(ds.user_ids(), ds.item_ids()),
    )?;
    let behaviors: Vec<Value> = (0..ds.num_behaviors())
        .map(|k| json!({ "behavior": ds.schema().names()[k], "edges": ds.num_edges(k) }))
        .collect();
    let report = json!({
        "command": "ingest",
        "version": VERSION,
        "users": ds.num_users(),
        "items": ds.num_items(),
        "target": cfg.corpus.target,
        "behaviors": behaviors,
        "warnings": loaded.warnings,
        "config": cfg.raw().to_json(),
    });
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let prep = prepare(cfg)?;
    let fit = train_model(&prep, &cfg.model, cfg)?;
    let ev = evaluate(&fit, &prep, cfg)?;
    write_json(
        &out.join("checkpoint.json"),
        &checkpoint_json(&fit.model, cfg.raw(), fit.best_epoch, fit.best_metric),
    )?;
    let rows: Vec<Vec<String>> = fit
        .history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                fmt(r.bpr),
                fmt(r.cl),
                fmt(r.l2),
                fmt(r.total),
                fmt(r.metric),
            ]
        })
        .collect();
    let history = out.join("history.csv");
    let hr_col = format!("hr@{EARLY_STOP_K}");
    write_csv(
        &history,
        &["epoch", "bpr", "cl", "l2", "total", &hr_col],
        &rows,
    )?;
    write_meta(&history, cfg.raw(), EVAL_NOTES)?;
    let report = json!({
        "command": "train",
        "version": VERSION,
        "best_epoch": fit.best_epoch,
        "epochs_run": fit.history.len(),
        "metrics": metrics_json(&ev),
        "dataset": dataset_summary(&prep),
        "warnings": prep.warnings,
        "notes": EVAL_NOTES,
        "config": cfg.raw().to_json(),
    });
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Variant names accepted by `ablate --variants`.
pub fn variant_names() -> Vec<&'static str> {
    Ablation::standard_variants()
        .iter()
        .map(|(n, _)| *n)
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, variants: Option<&[String]>, out: &Path) -> CliResult<Value> {
    let all = Ablation::standard_variants();
    let chosen: Vec<(&str, Ablation)> = match variants {
        None => all.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                all.iter().find(|(v, _)| v == n).copied().ok_or_else(|| {
                    CliError::usage(format!(
                        "unknown variant `{n}`; expected one of {:?}",
                        variant_names()
                    ))
                })
            })
            .collect::<CliResult<_>>()?,
    };
    let prep = prepare(cfg)?;
    let base = cfg.model.ablation();
    let mut rows = Vec::new();
    let mut report_rows = Vec::new();
    for (name, variant) in chosen {
        // single removals apply on top of whatever the config disables
        let abl = Ablation::from_mask(base.mask() & variant.mask());
        let model = cfg.model.clone().with_ablation(abl);
        let fit = train_model(&prep, &model, cfg)?;
        let ev = evaluate(&fit, &prep, cfg)?;
        let final_loss = fit.history.last().map(|r| r.total).unwrap_or(f64::NAN);
        let mut row = vec![name.to_string(), format!("{:06b}", abl.mask())];
        row.extend(metric_cells(&ev));
        row.push(fit.best_epoch.to_string());
        row.push(fmt(final_loss));
        rows.push(row);
        report_rows.push(json!({
            "variant": name,
            "mask": abl.mask(),
            "metrics": metrics_json(&ev),
            "best_epoch": fit.best_epoch,
            "final_loss": final_loss,
        }));
    }
    let mut header: Vec<String> = vec!["variant".into(), "mask".into()];
    header.extend(metric_header(cfg));
    header.push("best_epoch".into());
    header.push("final_loss".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let table = out.join("ablation.csv");
    write_csv(&table, &header, &rows)?;
    write_meta(&table, cfg.raw(), EVAL_NOTES)?;
    let report = json!({
        "command": "ablate",
        "version": VERSION,
        "mask_bits": "user_bias,item_bias,jaccard,moe,agg,cl (lowest bit first)",
        "rows": report_rows,
        "config": cfg.raw().to_json(),
    });
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

/// The temperature strategies compared by `temp-variants`.
pub fn temperature_variants(
    cfg: &RawConfig,
    include_inverse: bool,
) -> CliResult<Vec<(&'static str, TemperatureRule)>> {
    let mut out = Vec::new();
    let mut rules = vec!["bias_aware", "fixed", "learnable", "random", "linear"];
    if include_inverse {
        rules.push("inverse");
    }
    for rule in rules {
        let mut raw = cfg.clone();
        raw.set("contrast", "temp_rule", rule)?;
        let run = raw.resolve()?;
        out.push((run.model.temperature.name(), run.model.temperature));
    }
    Ok(out)
}

pub fn cmd_temp_variants(cfg: &RunConfig, include_inverse: bool, out: &Path) -> CliResult<Value> {
    let prep = prepare(cfg)?;
    let mut rows = Vec::new();
    let mut report_rows = Vec::new();
    for (name, rule) in temperature_variants(cfg.raw(), include_inverse)? {
        let model = ModelConfig {
            temperature: rule,
            ..cfg.model.clone()
        };
        let fit = train_model(&prep, &model, cfg)?;
        let ev = evaluate(&fit, &prep, cfg)?;
        let mut row = vec![name.to_string()];
        row.extend(metric_cells(&ev));
        row.push(fit.best_epoch.to_string());
        rows.push(row);
        report_rows.push(
            json!({ "rule": name, "metrics": metrics_json(&ev), "best_epoch": fit.best_epoch }),
        );
    }
    let mut header: Vec<String> = vec!["rule".into()];
    header.extend(metric_header(cfg));
    header.push("best_epoch".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let table = out.join("temperature.csv");
    write_csv(&table, &header, &rows)?;
    write_meta(&table, cfg.raw(), EVAL_NOTES)?;
    let report = json!({
        "command": "temp-variants",
        "version": VERSION,
        "rows": report_rows,
        "config": cfg.raw().to_json(),
    });
    write_json(&out.join("temperature.json"), &report)?;
    Ok(report)
}

fn per_user(rr: &RankingResult, k: usize) -> Vec<(u32, f64, f64)> {
    rr.entries
        .iter()
        .map(|e| {
            let (h, n) = entry_metrics(e, k);
            (e.user, h, n)
        })
        .collect()
}

pub fn cmd_analyze(
    cfg: &RunConfig,
    checkpoint: &Path,
    compare: Option<&Path>,
    out: &Path,
) -> CliResult<Value> {
    let prep = prepare(cfg)?;
    let a = read_checkpoint(checkpoint)?;
    let dims = prep.data.dims();
    if a.model.dims != dims {
        return Err(CliError::data(format!(
            "{} was trained on {:?}, dataset has {:?}",
            checkpoint.display(),
            a.model.dims,
            dims
        )));
    }
    let train = &prep.data.split.train;
    let specs = [
        group_users(train, cfg.eval.group_fraction)?,
        group_items(train, cfg.eval.group_fraction)?,
    ];
    let es = a.model.embeddings(&prep.data.graph)?;
    let rr = rank_parallel(&es, &prep.data.split, cfg.workers)?;
    let mut rows = Vec::new();
    for &k in &cfg.eval.ks {
        let (h, _) = hr_ndcg(&rr, k);
        rows.push(vec![
            "all".into(),
            "all".into(),
            k.to_string(),
            rr.entries.len().to_string(),
            fmt(h),
        ]);
        for spec in &specs {
            let kind = match spec.kind {
                mclmr_core::eval::GroupKind::UserActivity => "user_activity",
                mclmr_core::eval::GroupKind::ItemRatio => "item_ratio",
            };
            for g in mclmr_core::eval::group_metrics(&rr, spec, k) {
                // groups without test entries are omitted
                if let Some(v) = g.value {
                    rows.push(vec![
                        kind.into(),
                        g.label.into(),
                        k.to_string(),
                        g.members.to_string(),
                        fmt(v),
                    ]);
                }
            }
        }
    }
    let table = out.join("groups.csv");
    write_csv(&table, &["kind", "group", "k", "members", "recall"], &rows)?;
    let mut notes: Vec<&str> = EVAL_NOTES.to_vec();
    notes.push("groups with no test entries are omitted");
    write_meta(&table, cfg.raw(), &notes)?;

    let mut tests = Vec::new();
    if let Some(other) = compare {
        let b = read_checkpoint(other)?;
        if b.model.dims != dims {
            return Err(CliError::data(format!(
                "{} does not match the dataset",
                other.display()
            )));
        }
        let es_b = b.model.embeddings(&prep.data.graph)?;
        let rr_b = rank_parallel(&es_b, &prep.data.split, cfg.workers)?;
        for &k in &cfg.eval.ks {
            let (pa, pb) = (per_user(&rr, k), per_user(&rr_b, k));
            for (metric, pick) in [("hr", 1usize), ("ndcg", 2usize)] {
                let sel = |v: &[(u32, f64, f64)]| -> Vec<f64> {
                    v.iter()
                        .map(|x| if pick == 1 { x.1 } else { x.2 })
                        .collect()
                };
                let entry = match paired_t_test(&sel(&pa), &sel(&pb)) {
                    Ok(t) => {
                        json!({ "k": k, "metric": metric, "t": t.t, "p_value": t.p_value, "dof": t.dof })
                    }
                    Err(e) => json!({ "k": k, "metric": metric, "error": e.to_string() }),
                };
                tests.push(entry);
            }
        }
    }
    let report = json!({
        "command": "analyze",
        "version": VERSION,
        "checkpoint": checkpoint.display().to_string(),
        "compare": compare.map(|p| p.display().to_string()),
        "group_fraction": cfg.eval.group_fraction,
        "groups": rows.iter().map(|r| json!({
            "kind": r[0], "group": r[1], "k": r[2].parse::<usize>().unwrap_or(0),
            "members": r[3].parse::<usize>().unwrap_or(0), "recall": r[4].parse::<f64>().unwrap_or(f64::NAN),
        })).collect::<Vec<_>>(),
        "paired_t_tests": tests,
        "notes": notes,
        "config": cfg.raw().to_json(),
    });
    write_json(&out.join("analysis.json"), &report)?;
    Ok(report)
}

/// Raises a numerical failure when `passed` is false, after the report
/// has been produced.
pub struct Verdict {
    pub report: Value,
    pub passed: bool,
}

pub fn cmd_verify_backdoor(
    card: Cardinalities,
    trials: usize,
    seed: u64,
    threshold: f64,
) -> CliResult<Verdict> {
    let r = verify_backdoor(card, trials, seed, threshold)?;
    Ok(Verdict {
        passed: r.passed(),
        report: json!({
            "command": "verify-backdoor",
            "version": VERSION,
            "trials": r.trials,
            "seed": seed,
            "cardinalities": {
                "bias_user": card.bias_user, "bias_item": card.bias_item, "user": card.user,
                "item": card.item, "mediator": card.mediator, "outcome": card.outcome,
            },
            "max_deviation": r.max_deviation,
            "threshold": r.threshold,
            "passed": r.passed(),
        }),
    })
}

pub fn cmd_grad_check(cfg: &GradCheckConfig) -> CliResult<Verdict> {
    let r = grad_check(cfg)?;
    let trials: Vec<Value> = r
        .trials
        .iter()
        .map(|t| {
            json!({
                "trial": t.trial,
                "backbone": format!("{:?}", t.backbone),
                "ablation_mask": t.ablation_mask,
                "temperature": t.temperature,
                "max_error": t.groups.iter().map(|g| g.1).fold(0.0, f64::max),
            })
        })
        .collect();
    Ok(Verdict {
        passed: r.passed(),
        report: json!({
            "command": "grad-check",
            "version": VERSION,
            "step": cfg.h,
            "seed": cfg.seed,
            "threshold": r.threshold,
            "max_error": r.max_error,
            "distinct_masks": r.distinct_masks(),
            "per_group": r.per_group,
            "trials": trials,
            "passed": r.passed(),
        }),
    })
}

pub fn cmd_cost_estimate(n: u64, b: u64, r: u64, k_exp: u64, d: u64, u_s: u64, i_s: u64) -> Value {
    let c = estimate_cost(n, b, r, k_exp, d, u_s, i_s);
    // u128 terms are emitted as strings to stay exact in JSON
    json!({
        "command": "cost-estimate",
        "version": VERSION,
        "inputs": { "items": n, "behaviors": b, "jaccard_cost": r, "experts": k_exp, "dim": d, "user_batch": u_s, "item_batch": i_s },
        "jaccard_term": c.jaccard_term.to_string(),
        "moe_term": c.moe_term.to_string(),
        "aggregation_term": c.aggregation_term.to_string(),
        "contrastive_term": c.contrastive_term.to_string(),
        "total": c.total.to_string(),
        "contrastive_pairs_vanish": c.pairs_vanish,
    })
}

pub fn cmd_synth_gen(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let (ds, gt) = generate_confounded(&cfg.synth)?;
    let files: Vec<PathBuf> = write_interaction_files(out, &ds)?;
    write_json(&out.join("ground_truth.json"), &ground_truth_json(&gt))?;
    write_json(
        &out.join("id_map.json"),
        &id_map_json(ds.user_ids(), ds.item_ids()),
    )?;
    let behaviors: Vec<Value> = (0..ds.num_behaviors())
        .map(|k| json!({ "behavior": ds.schema().names()[k], "edges": ds.num_edges(k), "file": files[k].file_name().map(|f| f.to_string_lossy().into_owned()) }))
        .collect();
    let report = json!({
        "command": "synth-gen",
        "version": VERSION,
        "users": ds.num_users(),
        "items": ds.num_items(),
        "target": ds.schema().names()[ds.target()],
        "behaviors": behaviors,
        "config": cfg.raw().to_json(),
    });
    write_json(&out.join("synth.json"), &report)?;
    Ok(report)
}
