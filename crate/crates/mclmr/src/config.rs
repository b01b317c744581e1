//! `key = value` run configuration with `[section]` headers.
//!
//! Every key has a default; the resolved table (defaults plus file plus
//! overrides) is echoed verbatim into outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mclmr_core::backbone::BackboneKind;
use mclmr_core::contrast::{NegativePool, TemperatureRule};
use mclmr_core::model::{Ablation, ModelConfig};
use mclmr_core::synth::SynthConfig;
use mclmr_core::train::TrainConfig;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// `(section, key, default)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("corpus", "source", "files"),
    ("corpus", "data_dir", ""),
    ("corpus", "files", ""),
    ("corpus", "behaviors", "view,cart,buy"),
    ("corpus", "target", "buy"),
    ("corpus", "split_seed", "42"),
    ("backbone", "backbone", "lightprop"),
    ("backbone", "layers", "2"),
    ("backbone", "d", "64"),
    ("causal", "gamma_u", "0.1"),
    ("causal", "gamma_i", "0.01"),
    ("causal", "eps_b", "0.001"),
    ("causal", "user_bias", "true"),
    ("causal", "item_bias", "true"),
    ("fusion", "n_experts", "4"),
    ("fusion", "expert_hidden", "64"),
    ("fusion", "lambda_j_init", "0.5"),
    ("fusion", "lambda_m_init", "0.5"),
    ("fusion", "jaccard", "true"),
    ("fusion", "moe", "true"),
    ("fusion", "agg", "true"),
    ("contrast", "temp_rule", "bias_aware"),
    ("contrast", "tau0", "0.2"),
    ("contrast", "alpha", "0.5"),
    ("contrast", "tau_min", "0.01"),
    ("contrast", "tau_max", "1.0"),
    ("contrast", "random_lo", "0.1"),
    ("contrast", "random_hi", "0.5"),
    ("contrast", "beta", "1.0"),
    ("contrast", "lambda_cl", "0.1"),
    ("contrast", "cl", "true"),
    ("contrast", "min_interaction_filter", "true"),
    ("contrast", "negatives", "in_batch"),
    ("train", "lr", "0.001"),
    ("train", "l2", "0.00001"),
    ("train", "epochs", "100"),
    ("train", "batch_size", "1024"),
    ("train", "neg_per_pos", "1"),
    ("train", "patience", "10"),
    ("train", "seed", "42"),
    ("train", "workers", "1"),
    ("train", "freeze_backbone", "false"),
    ("train", "aux_bpr", "false"),
    ("eval", "ks", "10,20"),
    ("eval", "group_fraction", "0.2"),
    ("eval", "true_k", "50"),
    ("eval", "true_relevant", "10"),
    ("synth", "users", "300"),
    ("synth", "items", "300"),
    ("synth", "behaviors", "3"),
    ("synth", "d_true", "8"),
    ("synth", "density", "50"),
    ("synth", "bias_strength", "2.0"),
    ("synth", "cascade", "true"),
    ("synth", "dirichlet", "1.0"),
    ("synth", "affinity_temperature", "1.0"),
    ("synth", "seed", "0"),
];

/// Where interactions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// One interaction file per behavior, in schema order.
    Files(Vec<PathBuf>),
    /// Generated in-process from the `[synth]` section.
    Synth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub source: DataSource,
    pub behaviors: Vec<String>,
    pub target: String,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub group_fraction: f64,
    pub true_k: usize,
    pub true_relevant: usize,
}

/// Fully typed configuration plus the raw table it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub workers: usize,
    raw: RawConfig,
}

/// Resolved string values keyed by `(section, key)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<(String, String), String>,
    base_dir: PathBuf,
}

impl Default for RawConfig {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|&(s, k, v)| ((s.to_string(), k.to_string()), v.to_string()))
            .collect();
        Self {
            values,
            base_dir: PathBuf::from("."),
        }
    }
}

fn known(section: &str, key: &str) -> bool {
    KEYS.iter().any(|&(s, k, _)| s == section && k == key)
}

impl RawConfig {
    /// Parses config text; `path` is used for messages only.
    pub fn parse(text: &str, path: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (n, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = || format!("{path}:{}", n + 1);
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        CliError::usage(format!("{}: unterminated section header", at()))
                    })?
                    .trim();
                if !KEYS.iter().any(|&(s, _, _)| s == name) {
                    return Err(CliError::usage(format!(
                        "{}: unknown section [{name}]",
                        at()
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("{}: expected `key = value`", at())))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| CliError::usage(format!("{}: key outside any [section]", at())))?;
            cfg.set(sec, key.trim(), value.trim())
                .map_err(|e| e.context(&at()))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    /// Inverse of [`RawConfig::to_json`]; missing keys keep their defaults.
    pub fn from_json(value: &Value) -> CliResult<Self> {
        let mut cfg = Self::default();
        let sections = value
            .as_object()
            .ok_or_else(|| CliError::data("config echo is not an object"))?;
        for (section, keys) in sections {
            let keys = keys.as_object().ok_or_else(|| {
                CliError::data(format!("config echo section `{section}` is not an object"))
            })?;
            for (key, v) in keys {
                let v = v.as_str().ok_or_else(|| {
                    CliError::data(format!("config echo {section}.{key} is not a string"))
                })?;
                cfg.set(section, key, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> CliResult<()> {
        if !known(section, key) {
            return Err(CliError::usage(format!(
                "unknown key `{key}` in [{section}]"
            )));
        }
        self.values
            .insert((section.to_string(), key.to_string()), value.to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> CliResult<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            CliError::usage(format!("override `{spec}` is not section.key=value"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            CliError::usage(format!("override `{spec}` is not section.key=value"))
        })?;
        self.set(section, key, value.trim())
    }

    pub fn get(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {section}.{key} missing from defaults"))
    }

    /// `{"section": {"key": "value"}}` with every key present.
    pub fn to_json(&self) -> Value {
        let mut root = Map::new();
        for &(s, k, _) in KEYS {
            let entry = root.entry(s).or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = entry {
                m.insert(k.to_string(), Value::String(self.get(s, k).to_string()));
            }
        }
        Value::Object(root)
    }

    /// The config file text that reproduces this table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for &(s, k, _) in KEYS {
            if s != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                current = s;
            }
            out.push_str(&format!("{k} = {}\n", self.get(s, k)));
        }
        out
    }

    fn parse_value<T: std::str::FromStr>(&self, section: &str, key: &str) -> CliResult<T> {
        let v = self.get(section, key);
        v.parse()
            .map_err(|_| CliError::usage(format!("[{section}] {key} = `{v}` is not a valid value")))
    }

    fn flag(&self, section: &str, key: &str) -> CliResult<bool> {
        match self.get(section, key) {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            v => Err(CliError::usage(format!(
                "[{section}] {key} = `{v}` is not a boolean"
            ))),
        }
    }

    fn list(&self, section: &str, key: &str) -> Vec<String> {
        self.get(section, key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    fn temperature(&self) -> CliResult<TemperatureRule> {
        let f = |k: &str| self.parse_value::<f64>("contrast", k);
        let (tau0, alpha) = (f("tau0")?, f("alpha")?);
        let rule = match self.get("contrast", "temp_rule") {
            "bias_aware" => TemperatureRule::BiasAware { tau0, alpha },
            "fixed" => TemperatureRule::Fixed { tau: tau0 },
            "learnable" => TemperatureRule::Learnable {
                init: tau0,
                min: f("tau_min")?,
                max: f("tau_max")?,
            },
            "random" => TemperatureRule::Random {
                lo: f("random_lo")?,
                hi: f("random_hi")?,
            },
            "linear" => TemperatureRule::LinearAlt { tau0, alpha },
            "inverse" => TemperatureRule::InverseAlt {
                tau0,
                alpha,
                tau_min: f("tau_min")?,
            },
            other => {
                return Err(CliError::usage(format!(
                    "[contrast] temp_rule = `{other}`; expected bias_aware, fixed, learnable, random, linear or inverse"
                )))
            }
        };
        rule.validate()
            .map_err(|e| CliError::usage(format!("[contrast] {e}")))?;
        Ok(rule)
    }

    /// Builds the typed configuration, validating every value.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let layers: usize = self.parse_value("backbone", "layers")?;
        let backbone = match self.get("backbone", "backbone") {
            "mf" => BackboneKind::Mf,
            "lightprop" => BackboneKind::LightProp { layers },
            "cascade" => BackboneKind::Cascade { layers },
            other => {
                return Err(CliError::usage(format!(
                    "[backbone] backbone = `{other}`; expected mf, lightprop or cascade"
                )))
            }
        };
        let mut model = ModelConfig {
            backbone,
            dim: self.parse_value("backbone", "d")?,
            n_experts: self.parse_value("fusion", "n_experts")?,
            expert_hidden: self.parse_value("fusion", "expert_hidden")?,
            temperature: self.temperature()?,
            aux_bpr: self.flag("train", "aux_bpr")?,
            ..ModelConfig::default()
        };
        model.debias.gamma_u = self.parse_value("causal", "gamma_u")?;
        model.debias.gamma_i = self.parse_value("causal", "gamma_i")?;
        model.debias.eps_b = self.parse_value("causal", "eps_b")?;
        model.fusion.lambda_j = self.parse_value("fusion", "lambda_j_init")?;
        model.fusion.lambda_m = self.parse_value("fusion", "lambda_m_init")?;
        model.cl.beta = self.parse_value("contrast", "beta")?;
        model.cl.lambda_cl = self.parse_value("contrast", "lambda_cl")?;
        model.cl.min_interaction_filter = self.flag("contrast", "min_interaction_filter")?;
        model.cl.negatives = match self.get("contrast", "negatives") {
            "in_batch" => NegativePool::InBatch,
            "full" => NegativePool::Full,
            other => {
                return Err(CliError::usage(format!(
                    "[contrast] negatives = `{other}`; expected in_batch or full"
                )))
            }
        };
        let model = model.with_ablation(Ablation {
            user_bias: self.flag("causal", "user_bias")?,
            item_bias: self.flag("causal", "item_bias")?,
            jaccard: self.flag("fusion", "jaccard")?,
            moe: self.flag("fusion", "moe")?,
            agg: self.flag("fusion", "agg")?,
            cl: self.flag("contrast", "cl")?,
        });
        model
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;

        let train = TrainConfig {
            lr: self.parse_value("train", "lr")?,
            l2: self.parse_value("train", "l2")?,
            epochs: self.parse_value("train", "epochs")?,
            batch_size: self.parse_value("train", "batch_size")?,
            neg_per_pos: self.parse_value("train", "neg_per_pos")?,
            patience: self.parse_value("train", "patience")?,
            seed: self.parse_value("train", "seed")?,
            freeze_backbone: self.flag("train", "freeze_backbone")?,
        };
        train
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        let workers: usize = self.parse_value("train", "workers")?;
        if workers == 0 {
            return Err(CliError::usage("[train] workers must be at least 1"));
        }

        let source = match self.get("corpus", "source") {
            "synth" => DataSource::Synth,
            "files" => DataSource::Files(self.data_files()?),
            other => {
                return Err(CliError::usage(format!(
                    "[corpus] source = `{other}`; expected files or synth"
                )))
            }
        };
        let corpus = CorpusConfig {
            source,
            behaviors: self.list("corpus", "behaviors"),
            target: self.get("corpus", "target").to_string(),
            split_seed: self.parse_value("corpus", "split_seed")?,
        };

        let ks = self
            .list("eval", "ks")
            .iter()
            .map(|k| k.parse::<usize>().ok().filter(|&k| k > 0))
            .collect::<Option<Vec<_>>>()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| {
                CliError::usage("[eval] ks must be a comma list of positive integers")
            })?;
        let eval = EvalConfig {
            ks,
            group_fraction: self.parse_value("eval", "group_fraction")?,
            true_k: self.parse_value("eval", "true_k")?,
            true_relevant: self.parse_value("eval", "true_relevant")?,
        };
        if !(eval.group_fraction > 0.0 && eval.group_fraction < 1.0) {
            return Err(CliError::usage("[eval] group_fraction must lie in (0, 1)"));
        }

        let synth = SynthConfig {
            num_users: self.parse_value("synth", "users")?,
            num_items: self.parse_value("synth", "items")?,
            num_behaviors: self.parse_value("synth", "behaviors")?,
            d_true: self.parse_value("synth", "d_true")?,
            density: self.parse_value("synth", "density")?,
            bias_strength: self.parse_value("synth", "bias_strength")?,
            cascade: self.flag("synth", "cascade")?,
            dirichlet_concentration: self.parse_value("synth", "dirichlet")?,
            affinity_temperature: self.parse_value("synth", "affinity_temperature")?,
            seed: self.parse_value("synth", "seed")?,
        };
        synth
            .validate()
            .map_err(|e| CliError::usage(format!("[synth] {e}")))?;

        Ok(RunConfig {
            corpus,
            model,
            train,
            eval,
            synth,
            workers,
            raw: self.clone(),
        })
    }

    /// Interaction files: the explicit `files` list, else
    /// `data_dir/<behavior>.tsv` for each behavior.
    fn data_files(&self) -> CliResult<Vec<PathBuf>> {
        let files = self.list("corpus", "files");
        let behaviors = self.list("corpus", "behaviors");
        let paths: Vec<PathBuf> = if !files.is_empty() {
            files.iter().map(PathBuf::from).collect()
        } else if !self.get("corpus", "data_dir").is_empty() {
            let dir = PathBuf::from(self.get("corpus", "data_dir"));
            behaviors
                .iter()
                .map(|b| dir.join(format!("{b}.tsv")))
                .collect()
        } else {
            Vec::new()
        };
        if !paths.is_empty() && paths.len() != behaviors.len() {
            return Err(CliError::usage(format!(
                "[corpus] {} files given for {} behaviors",
                paths.len(),
                behaviors.len()
            )));
        }
        Ok(paths
            .into_iter()
            .map(|p| {
                if p.is_relative() {
                    self.base_dir.join(p)
                } else {
                    p
                }
            })
            .collect())
    }
}

impl RunConfig {
    pub fn raw(&self) -> &RawConfig {
        &self.raw
    }

    /// Loads `path` (defaults only when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut raw = match path {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::default(),
        };
        for o in overrides {
            raw.apply_override(o)?;
        }
        raw.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RawConfig::default().resolve().unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.corpus.source, DataSource::Files(Vec::new()));
        assert_eq!(cfg.eval.ks, vec![10, 20]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RawConfig::parse("[train]\nlearning_rate = 0.1\n", "x.conf").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        assert!(
            msg.contains("learning_rate") && msg.contains("x.conf:2"),
            "{msg}"
        );
        assert!(RawConfig::parse("[nope]\n", "x").is_err());
        assert!(RawConfig::parse("lr = 1\n", "x").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut raw = RawConfig::parse(
            "# comment\n[backbone]\nbackbone = mf\nd = 8\n\n[contrast]\ntemp_rule = random\n",
            "x",
        )
        .unwrap();
        raw.apply_override("train.epochs=3").unwrap();
        let again = RawConfig::parse(&raw.to_text(), "y").unwrap();
        assert_eq!(again.values, raw.values);
        let cfg = again.resolve().unwrap();
        assert_eq!(cfg.model.backbone, BackboneKind::Mf);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(
            cfg.model.temperature,
            TemperatureRule::Random { lo: 0.1, hi: 0.5 }
        );
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "[train]\nlr = fast\n",
            "[causal]\nuser_bias = maybe\n",
            "[backbone]\nbackbone = transformer\n",
            "[eval]\nks = 10,0\n",
            "[train]\nworkers = 0\n",
            "[contrast]\nalpha = 1.5\n",
        ] {
            let raw = RawConfig::parse(text, "x").unwrap();
            assert_eq!(raw.resolve().unwrap_err().exit_code(), 1, "{text}");
        }
    }

    #[test]
    fn ablation_flags_map_to_model() {
        let raw = RawConfig::parse("[fusion]\nmoe = false\n[contrast]\ncl = off\n", "x").unwrap();
        let a = raw.resolve().unwrap().model.ablation();
        assert!(!a.moe && !a.cl && a.jaccard && a.user_bias);
    }

    #[test]
    fn json_echo_lists_every_key() {
        let json = RawConfig::default().to_json();
        let total: usize = json
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_object().unwrap().len())
            .sum();
        assert_eq!(total, KEYS.len());
        assert_eq!(json["train"]["seed"], "42");
    }
}
