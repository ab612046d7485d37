//! Flat `key = value` experiment configuration with dotted namespaces.
//!
//! A file either sets every key or starts with `extends = <path>` and
//! overrides some of the parent's keys. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use loraloop::continual::{Method, RunConfig};
use loraloop::distill::LossWeights;
use loraloop::lora::LoraConfig;
use loraloop::selection::Policy;
use loraloop::taskgen::GapProfile;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{file}:{line}: {message}")]
    Line {
        file: String,
        line: usize,
        message: String,
    },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// `run.seed` is ignored; each run takes one of `seeds`.
    pub run: RunConfig,
    pub real_replay_budget: usize,
}

impl ExperimentConfig {
    /// Every hyperparameter at its published value.
    pub fn paper_defaults() -> Self {
        let desk = RunConfig::default();
        Self {
            seeds: (1..=5).collect(),
            run: RunConfig {
                lora: LoraConfig::default(),
                steps_per_task: 1000,
                batch: 64,
                weights: LossWeights::default(),
                ..desk
            },
            real_replay_budget: 2,
        }
    }

    /// Minutes-scale overrides used by the acceptance suite.
    pub fn desk_defaults() -> Self {
        Self {
            seeds: (1..=5).collect(),
            run: RunConfig::default(),
            real_replay_budget: 2,
        }
    }

    /// The run configuration for one seed.
    pub fn run_config(&self, seed: u64) -> RunConfig {
        let method = match self.run.method {
            Method::RealReplay { .. } => Method::RealReplay {
                budget: self.real_replay_budget,
            },
            m => m,
        };
        RunConfig {
            seed,
            method,
            ..self.run.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let entries = read_entries(path, 0)?;
        Self::from_entries(&entries)
    }

    pub fn parse_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        parse_into(text, origin, Path::new("."), 0, &mut entries)?;
        Self::from_entries(&entries)
    }

    fn from_entries(entries: &BTreeMap<String, Entry>) -> Result<Self, ConfigError> {
        let mut cfg = Self::desk_defaults();
        for key in entries.keys() {
            if !KEYS.iter().any(|k| k.name == key) {
                let e = &entries[key];
                return Err(e.error(format!("unknown key `{key}`")));
            }
        }
        for k in KEYS {
            let e = entries
                .get(k.name)
                .ok_or_else(|| ConfigError::Missing(k.name.to_string()))?;
            (k.set)(&mut cfg, &e.value).map_err(|m| e.error(format!("`{}`: {m}", k.name)))?;
        }
        if cfg.seeds.is_empty() {
            return Err(ConfigError::Invalid("`seeds` must list at least one seed".into()));
        }
        cfg.run_config(cfg.seeds[0])
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Canonical text with every key, parseable by [`parse_str`](Self::parse_str).
    pub fn to_conf_string(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in KEYS {
            let ns = k.name.split_once('.').map_or("", |(ns, _)| ns);
            if ns != section && !out.is_empty() {
                out.push('\n');
            }
            section = ns;
            out.push_str(&format!("{} = {}\n", k.name, (k.get)(self)));
        }
        out
    }

    /// SHA-256 over every key except `seeds`.
    pub fn hash(&self) -> String {
        self.hash_where(|name| name != "seeds")
    }

    /// SHA-256 over the keys that determine the task suite.
    pub fn suite_hash(&self) -> String {
        self.hash_where(|name| name.starts_with("suite."))
    }

    fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| keep(k.name)) {
            h.update(format!("{}={}\n", k.name, (k.get)(self)).as_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    file: String,
    line: usize,
}

impl Entry {
    fn error(&self, message: String) -> ConfigError {
        ConfigError::Line {
            file: self.file.clone(),
            line: self.line,
            message,
        }
    }
}

const MAX_EXTENDS_DEPTH: usize = 8;

fn read_entries(path: &Path, depth: usize) -> Result<BTreeMap<String, Entry>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = BTreeMap::new();
    parse_into(&text, &path.display().to_string(), &dir, depth, &mut entries)?;
    Ok(entries)
}

fn parse_into(
    text: &str,
    origin: &str,
    dir: &Path,
    depth: usize,
    entries: &mut BTreeMap<String, Entry>,
) -> Result<(), ConfigError> {
    let mut seen_assignment = false;
    let mut own = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let here = |message: String| ConfigError::Line {
            file: origin.to_string(),
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| here("expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(here("expected `key = value`".into()));
        }
        if key == "extends" {
            if seen_assignment {
                return Err(here("`extends` must precede every assignment".into()));
            }
            if depth >= MAX_EXTENDS_DEPTH {
                return Err(here("`extends` chain too deep".into()));
            }
            let parent: PathBuf = dir.join(value);
            *entries = read_entries(&parent, depth + 1)?;
            continue;
        }
        seen_assignment = true;
        let entry = Entry {
            value: value.to_string(),
            file: origin.to_string(),
            line: i + 1,
        };
        if own.insert(key.to_string(), entry).is_some() {
            return Err(here(format!("duplicate key `{key}`")));
        }
    }
    entries.extend(own);
    Ok(())
}

trait ConfValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

fn parse_via<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                parse_via(s)
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

impl ConfValue for Option<f64> {
    fn parse(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            parse_via(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

impl ConfValue for Vec<u64> {
    fn parse(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| parse_via(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }
}

impl ConfValue for Policy {
    fn parse(s: &str) -> Result<Self, String> {
        parse_via(s)
    }
    fn show(&self) -> String {
        self.as_str().into()
    }
}

impl ConfValue for GapProfile {
    fn parse(s: &str) -> Result<Self, String> {
        parse_via(s)
    }
    fn show(&self) -> String {
        match self {
            GapProfile::Mild => "mild".into(),
            GapProfile::Hard => "hard".into(),
        }
    }
}

/// Method kinds without parameters; the real-replay budget is its own key.
impl ConfValue for Method {
    fn parse(s: &str) -> Result<Self, String> {
        if s == "real_replay" {
            return Ok(Method::RealReplay { budget: 0 });
        }
        match parse_via::<Method>(s)? {
            Method::RealReplay { .. } => Err("use `real_replay` with `baseline.real_replay_budget`".into()),
            m => Ok(m),
        }
    }
    fn show(&self) -> String {
        match self {
            Method::RealReplay { .. } => "real_replay".into(),
            m => m.name(),
        }
    }
}

struct Key {
    name: &'static str,
    get: fn(&ExperimentConfig) -> String,
    set: fn(&mut ExperimentConfig, &str) -> Result<(), String>,
}

macro_rules! keys {
    ($($name:literal => $($field:ident).+;)*) => {
        const KEYS: &[Key] = &[$(
            Key {
                name: $name,
                get: |c| ConfValue::show(&c.$($field).+),
                set: |c, s| {
                    c.$($field).+ = ConfValue::parse(s)?;
                    Ok(())
                },
            },
        )*];
    };
}

keys! {
    "seeds" => seeds;
    "method" => run.method;

    "suite.n_tasks" => run.suite.n_tasks;
    "suite.classes_per_task" => run.suite.classes_per_task;
    "suite.base_classes" => run.suite.base_classes;
    "suite.train_per_class" => run.suite.train_per_class;
    "suite.test_per_class" => run.suite.test_per_class;
    "suite.corpus_per_class" => run.suite.corpus_per_class;
    "suite.gap" => run.suite.gap;

    "vlm.hidden" => run.vlm.hidden;
    "vlm.embed_dim" => run.vlm.embed_dim;
    "vlm.token_dim" => run.vlm.token_dim;
    "vlm.text_hidden" => run.vlm.text_hidden;
    "vlm.init_tau" => run.vlm.init_tau;
    "vlm.tau_min" => run.vlm.tau_min;
    "vlm.tau_max" => run.vlm.tau_max;
    "vlm.learn_tau" => run.vlm.learn_tau;
    "vlm.lr" => run.vlm.optimizer.lr;
    "vlm.beta1" => run.vlm.optimizer.beta1;
    "vlm.beta2" => run.vlm.optimizer.beta2;
    "vlm.eps" => run.vlm.optimizer.eps;
    "vlm.weight_decay" => run.vlm.optimizer.weight_decay;

    "generator.hidden" => run.generator.hidden;
    "generator.time_dim" => run.generator.time_dim;
    "generator.cond_dim" => run.generator.cond_dim;
    "generator.steps" => run.generator.steps;
    "generator.beta_start" => run.generator.beta_start;
    "generator.beta_end" => run.generator.beta_end;
    "generator.sigma_data" => run.generator.sigma_data;
    "generator.guidance" => run.generator.guidance;
    "generator.cond_dropout" => run.generator.cond_dropout;
    "generator.lr" => run.generator.optimizer.lr;
    "generator.beta1" => run.generator.optimizer.beta1;
    "generator.beta2" => run.generator.optimizer.beta2;
    "generator.eps" => run.generator.optimizer.eps;
    "generator.weight_decay" => run.generator.optimizer.weight_decay;

    "lora.rank" => run.lora.rank;
    "lora.alpha" => run.lora.alpha;
    "lora.epochs" => run.lora.epochs;
    "lora.steps_per_epoch" => run.lora.steps_per_epoch;
    "lora.cond_dropout" => run.lora.cond_dropout;
    "lora.lr" => run.lora.optimizer.lr;
    "lora.beta1" => run.lora.optimizer.beta1;
    "lora.beta2" => run.lora.optimizer.beta2;
    "lora.eps" => run.lora.optimizer.eps;
    "lora.weight_decay" => run.lora.optimizer.weight_decay;

    "pretrain.vlm_steps" => run.pretrain.vlm_steps;
    "pretrain.vlm_batch" => run.pretrain.vlm_batch;
    "pretrain.gen_epochs" => run.pretrain.gen_epochs;
    "pretrain.gen_batch" => run.pretrain.gen_batch;
    "pretrain.seed_importance" => run.pretrain.seed_importance;

    "loop.steps_per_task" => run.steps_per_task;
    "loop.batch" => run.batch;
    "loop.replay_fraction" => run.replay_fraction;
    "loop.replay" => run.replay;
    "loop.adapters" => run.adapters;
    "loop.filter" => run.filter;
    "loop.m_pre" => run.m_pre;
    "loop.k" => run.k;
    "loop.l" => run.l;
    "loop.filter_policy" => run.filter_policy;
    "loop.lora_policy" => run.lora_policy;
    "loop.importance_decay" => run.importance_decay;
    "loop.class_incremental" => run.class_incremental;
    "loop.workers" => run.workers;

    "loss.cd" => run.weights.cd;
    "loss.ita" => run.weights.ita;
    "loss.awc" => run.weights.awc;
    "loss.use_cd" => run.weights.use_cd;
    "loss.use_ita" => run.weights.use_ita;
    "loss.use_awc" => run.weights.use_awc;

    "metrics.transfer_includes_row0" => run.transfer_includes_row0;

    "baseline.l2_lambda" => run.l2_lambda;
    "baseline.real_replay_budget" => real_replay_budget;
}

/// Names of every key, in file order.
pub fn key_names() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|k| k.name)
}

/// Sets one key on an already-resolved configuration.
pub fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let k = KEYS
        .iter()
        .find(|k| k.name == key)
        .ok_or_else(|| ConfigError::Invalid(format!("unknown key `{key}`")))?;
    (k.set)(cfg, value).map_err(|m| ConfigError::Invalid(format!("`{key}`: {m}")))
}

pub fn get_key(cfg: &ExperimentConfig, key: &str) -> Option<String> {
    KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        for cfg in [ExperimentConfig::paper_defaults(), ExperimentConfig::desk_defaults()] {
            let text = cfg.to_conf_string();
            let back = ExperimentConfig::parse_str(&text, "inline").unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_key_is_line_anchored() {
        let mut text = ExperimentConfig::desk_defaults().to_conf_string();
        text.push_str("loop.bogus = 3\n");
        let line = text.lines().count();
        match ExperimentConfig::parse_str(&text, "x.conf") {
            Err(ConfigError::Line { line: l, message, .. }) => {
                assert_eq!(l, line);
                assert!(message.contains("loop.bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_key_names_the_key() {
        let text: String = ExperimentConfig::desk_defaults()
            .to_conf_string()
            .lines()
            .filter(|l| !l.starts_with("loop.k "))
            .map(|l| format!("{l}\n"))
            .collect();
        assert_eq!(
            ExperimentConfig::parse_str(&text, "x").unwrap_err(),
            ConfigError::Missing("loop.k".into())
        );
    }

    #[test]
    fn bad_value_and_duplicate_are_rejected() {
        let base = ExperimentConfig::desk_defaults().to_conf_string();
        let bad = base.replace("loop.m_pre = 8", "loop.m_pre = eight");
        assert!(matches!(
            ExperimentConfig::parse_str(&bad, "x"),
            Err(ConfigError::Line { .. })
        ));
        let dup = format!("{base}seeds = 1\n");
        assert!(ExperimentConfig::parse_str(&dup, "x").is_err());
        let invalid = base.replace("loop.k = 1", "loop.k = 9");
        assert!(matches!(
            ExperimentConfig::parse_str(&invalid, "x"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn comments_and_hash_sensitivity() {
        let cfg = ExperimentConfig::desk_defaults();
        let text = format!("# header\n{}", cfg.to_conf_string().replace("\n", "  # note\n"));
        assert_eq!(ExperimentConfig::parse_str(&text, "x").unwrap(), cfg);
        let mut other = cfg.clone();
        other.seeds = vec![9];
        assert_eq!(other.hash(), cfg.hash());
        other.run.k = 2;
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(other.suite_hash(), cfg.suite_hash());
    }

    #[test]
    fn real_replay_budget_reaches_the_method() {
        let mut cfg = ExperimentConfig::desk_defaults();
        set_key(&mut cfg, "method", "real_replay").unwrap();
        set_key(&mut cfg, "baseline.real_replay_budget", "3").unwrap();
        assert_eq!(cfg.run_config(4).method, Method::RealReplay { budget: 3 });
        assert_eq!(cfg.run_config(4).seed, 4);
        assert_eq!(get_key(&cfg, "method").unwrap(), "real_replay");
    }

    #[test]
    fn shipped_configs_match_constructors() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let paper = ExperimentConfig::load(&dir.join("paper_defaults.conf")).unwrap();
        assert_eq!(paper, ExperimentConfig::paper_defaults());
        let desk = ExperimentConfig::load(&dir.join("desk_defaults.conf")).unwrap();
        assert_eq!(desk, ExperimentConfig::desk_defaults());
    }
}
