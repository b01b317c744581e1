//! File formats: interaction TSVs, id maps, checkpoints, ground truth,
//! and CSV/JSON writers.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use mclmr_core::corpus::{BehaviorSchema, IdMap, InteractionDataset};
use mclmr_core::model::{Dims, Model};
use mclmr_core::params::{ParamGroup, ParamStore};
use mclmr_core::synth::GroundTruth;
use mclmr_core::Error as CoreError;
use serde_json::{json, Value};

use crate::config::RawConfig;
use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const CHECKPOINT_FORMAT: &str = "mclmr-checkpoint";
const GROUND_TRUTH_FORMAT: &str = "mclmr-ground-truth";
const F64_ENCODING: &str = "base64-f64le";

/// A loaded dataset plus non-fatal notes about it.
#[derive(Debug)]
pub struct Loaded {
    pub dataset: InteractionDataset,
    pub warnings: Vec<String>,
}

/// Reads one interaction file per behavior (schema order).
pub fn load_dataset(schema: BehaviorSchema, paths: &[PathBuf]) -> CliResult<Loaded> {
    if paths.len() != schema.num_behaviors() {
        return Err(CliError::usage(format!(
            "{} interaction files for {} behaviors",
            paths.len(),
            schema.num_behaviors()
        )));
    }
    let mut sources = Vec::with_capacity(paths.len());
    let mut warnings = Vec::new();
    for (p, name) in paths.iter().zip(schema.names()) {
        let text =
            fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        if text.trim().is_empty() {
            warnings.push(format!(
                "behavior `{name}` ({}) has no interactions",
                p.display()
            ));
        }
        sources.push(text);
    }
    let dataset = InteractionDataset::from_sources(schema, &sources).map_err(|e| match e {
        CoreError::MalformedLine {
            source_index,
            line,
            fields,
        } => CliError::data(format!(
            "{}:{line}: expected `user<TAB>item`, found {fields} field(s)",
            paths[source_index].display()
        )),
        other => CliError::from(other),
    })?;
    Ok(Loaded { dataset, warnings })
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// RFC-4180 CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    write_text(
        path,
        &String::from_utf8(bytes).expect("csv output is utf-8"),
    )
}

/// Writes the sidecar `<file>.meta.json` carrying config and version.
pub fn write_meta(table: &Path, config: &RawConfig, notes: &[&str]) -> CliResult<()> {
    let mut name = table.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    let meta = json!({
        "version": VERSION,
        "table": table.file_name().map(|n| n.to_string_lossy().into_owned()),
        "config": config.to_json(),
        "notes": notes,
    });
    write_json(&table.with_file_name(name), &meta)
}

pub fn id_map_json(users: &IdMap, items: &IdMap) -> Value {
    json!({ "users": users.external_ids(), "items": items.external_ids() })
}

pub fn read_id_map(path: &Path) -> CliResult<(IdMap, IdMap)> {
    let v = read_json(path)?;
    let list = |key: &str| -> CliResult<IdMap> {
        let ids = v[key]
            .as_array()
            .ok_or_else(|| CliError::data(format!("{}: missing `{key}` array", path.display())))?
            .iter()
            .map(|x| x.as_str().map(String::from))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| {
                CliError::data(format!("{}: `{key}` must hold strings", path.display()))
            })?;
        IdMap::from_external(ids).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    };
    Ok((list("users")?, list("items")?))
}

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str) -> CliResult<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| CliError::data(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::data(format!(
            "{} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn dims_json(d: &Dims) -> Value {
    json!({
        "users": d.num_users,
        "items": d.num_items,
        "behaviors": d.num_behaviors,
        "target": d.target,
    })
}

fn usize_field(v: &Value, key: &str) -> CliResult<usize> {
    v[key]
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| CliError::data(format!("missing integer field `{key}`")))
}

pub fn checkpoint_json(model: &Model, config: &RawConfig, epoch: usize, metric: f64) -> Value {
    let groups: Vec<Value> = model
        .params
        .groups()
        .iter()
        .map(|g| json!({ "name": g.name, "shape": g.shape, "data": encode_f64(&g.data) }))
        .collect();
    json!({
        "header": {
            "format": CHECKPOINT_FORMAT,
            "version": VERSION,
            "encoding": F64_ENCODING,
            "epoch": epoch,
            "metric": metric,
            "dims": dims_json(&model.dims),
            "config": config.to_json(),
        },
        "groups": groups,
    })
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: RawConfig,
    pub epoch: usize,
    pub metric: f64,
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let ctx = |e: CliError| e.context(&path.display().to_string());
    let v = read_json(path)?;
    let header = &v["header"];
    if header["format"] != CHECKPOINT_FORMAT {
        return Err(ctx(CliError::data("not an mclmr checkpoint")));
    }
    let config = RawConfig::from_json(&header["config"]).map_err(ctx)?;
    let run = config.resolve().map_err(ctx)?;
    let d = &header["dims"];
    let dims = Dims {
        num_users: usize_field(d, "users").map_err(ctx)?,
        num_items: usize_field(d, "items").map_err(ctx)?,
        num_behaviors: usize_field(d, "behaviors").map_err(ctx)?,
        target: usize_field(d, "target").map_err(ctx)?,
    };
    let mut params = ParamStore::new();
    for g in v["groups"]
        .as_array()
        .ok_or_else(|| ctx(CliError::data("missing `groups`")))?
    {
        let name = g["name"]
            .as_str()
            .ok_or_else(|| ctx(CliError::data("group without name")))?;
        let shape = g["shape"]
            .as_array()
            .and_then(|a| {
                a.iter()
                    .map(|x| x.as_u64().map(|x| x as usize))
                    .collect::<Option<Vec<_>>>()
            })
            .ok_or_else(|| ctx(CliError::data(format!("group {name}: bad shape"))))?;
        let data = decode_f64(g["data"].as_str().unwrap_or_default()).map_err(ctx)?;
        params.push(
            ParamGroup::new(name, shape, data).map_err(|e| ctx(CliError::data(e.to_string())))?,
        );
    }
    let model = Model::from_params(run.model, dims, params)
        .map_err(|e| ctx(CliError::data(e.to_string())))?;
    Ok(Checkpoint {
        model,
        epoch: usize_field(header, "epoch").map_err(ctx)?,
        metric: header["metric"].as_f64().unwrap_or(f64::NAN),
        config,
    })
}

pub fn ground_truth_json(gt: &GroundTruth) -> Value {
    json!({
        "header": {
            "format": GROUND_TRUTH_FORMAT,
            "version": VERSION,
            "encoding": F64_ENCODING,
            "layout": "row-major",
            "users": gt.num_users,
            "items": gt.num_items,
            "behaviors": gt.num_behaviors,
            "shapes": {
                "affinity": [gt.num_users, gt.num_items],
                "bias_user": [gt.num_users, gt.num_behaviors],
                "bias_item": [gt.num_items, gt.num_behaviors],
            },
        },
        "affinity": encode_f64(&gt.affinity),
        "bias_user": encode_f64(&gt.bias_user),
        "bias_item": encode_f64(&gt.bias_item),
    })
}

pub fn read_ground_truth(path: &Path) -> CliResult<GroundTruth> {
    let ctx = |e: CliError| e.context(&path.display().to_string());
    let v = read_json(path)?;
    let h = &v["header"];
    if h["format"] != GROUND_TRUTH_FORMAT {
        return Err(ctx(CliError::data("not an mclmr ground-truth file")));
    }
    let field = |k: &str| decode_f64(v[k].as_str().unwrap_or_default()).map_err(ctx);
    GroundTruth::new(
        usize_field(h, "users").map_err(ctx)?,
        usize_field(h, "items").map_err(ctx)?,
        usize_field(h, "behaviors").map_err(ctx)?,
        field("affinity")?,
        field("bias_user")?,
        field("bias_item")?,
    )
    .map_err(|e| ctx(CliError::data(e.to_string())))
}

/// Writes `<dir>/<behavior>.tsv` in corpus format, returning the paths.
pub fn write_interaction_files(dir: &Path, ds: &InteractionDataset) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (k, name) in ds.schema().names().iter().enumerate() {
        let mut text = String::new();
        for (u, items) in ds.behavior_lists(k).iter().enumerate() {
            let user = ds.user_ids().external(u as u32).expect("dense user id");
            for &i in items {
                text.push_str(user);
                text.push('\t');
                text.push_str(ds.item_ids().external(i).expect("dense item id"));
                text.push('\n');
            }
        }
        let path = dir.join(format!("{name}.tsv"));
        write_text(&path, &text)?;
        out.push(path);
    }
    Ok(out)
}
