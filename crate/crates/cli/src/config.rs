//! Layered `key=value` configuration.
//!
//! Layers, later winning: built-in defaults, the `--config` file, `QRT_*`
//! environment variables, then command-line flags. Every key lives in the
//! [`KEYS`] table; anything else is rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::Failure;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const ENV_PREFIX: &str = "QRT_";

pub const KEYS: &[Key] = &[
    key("seed", "0", "master seed for every random stream"),
    key("analysis.lowercase", "true", "lowercase tokens"),
    key("analysis.stopwords", "none", "stopword file, one word per line, or none"),
    key("bm25.k1", "1.2", "term-frequency saturation"),
    key("bm25.b", "0.75", "length normalization"),
    key("bm25.depth", "100", "documents retrieved per query"),
    key("relevance.provider", "hashed", "hashed | precomputed | remote"),
    key("relevance.dim", "1024", "embedding dimension (hashed and remote)"),
    key("relevance.vectors", "none", "JSON-lines vector file for the precomputed provider"),
    key("relevance.endpoint", "none", "base URL of the remote embedding service"),
    key("relevance.timeout_secs", "30", "remote request timeout"),
    key("relevance.retries", "3", "remote retries after the first failure"),
    key("relevance.max_in_flight", "4", "concurrent remote requests"),
    key("relevance.batch_size", "32", "texts per remote request"),
    key("relevance.max_tokens", "512", "remote input limit in tokens, or none"),
    key("reward.mode", "plain", "plain | explicit-thinking"),
    key("reward.content", "answer", "answer | thinking-and-answer"),
    key("reward.max_completion_tokens", "500", "rewrites are cut to this many tokens"),
    key("grpo.group_size", "16", "rewrites sampled per query"),
    key("grpo.clip_epsilon", "0.2", "ratio clip range"),
    key("grpo.kl_beta", "0.008", "KL penalty weight"),
    key("grpo.delta", "0.0001", "advantage denominator offset"),
    key("grpo.learning_rate", "0.1", "step size on the policy logits"),
    key("grpo.group_weight", "uniform", "uniform | variance-scaled"),
    key("grpo.loss_aggregation", "group-sum", "group-sum | token-mean"),
    key("grpo.epochs_per_batch", "1", "gradient steps per rollout batch"),
    key("grpo.batch_size", "none", "samples per iteration, or none for all"),
    key("grpo.iterations", "200", "training iterations"),
    key("grpo.buckets", "1024", "query feature buckets of the toy policy"),
    key("grpo.expansion_length", "3", "terms appended per rewrite"),
    key("eval.k", "10", "nDCG cutoff"),
    key("eval.skip_unjudged", "false", "drop queries without judgments or results"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// `grpo.kl_beta` -> `QRT_GRPO_KL_BETA`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase())
}

/// Text appended to `--help`.
pub fn help_text() -> String {
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Configuration keys (set in --config files as key=value, as QRT_<KEY> environment\n\
         variables, or with --set key=value; later layers win):\n",
    );
    for k in KEYS {
        let _ = writeln!(out, "  {:<width$}  {:<10} {}", k.name, k.default, k.help);
    }
    out
}

#[derive(Debug, Clone)]
pub struct AppConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl AppConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), Failure> {
        let key = lookup(name).ok_or_else(|| Failure::Usage(format!("unknown configuration key {name:?}")))?;
        self.values.insert(key.name, value.trim().to_string());
        Ok(())
    }

    /// Apply a `key=value` assignment as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), Failure> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Lines are `key = value`; `#` starts a comment; a `[section]` header
    /// prefixes the keys that follow it.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Failure> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Failure::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut section = String::new();
        for (i, line) in raw.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = format!("{}.", name.trim());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::Usage(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            let name = format!("{section}{}", k.trim());
            self.set(&name, v)
                .map_err(|e| Failure::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), Failure> {
        let by_env: BTreeMap<String, &str> = KEYS.iter().map(|k| (env_name(k.name), k.name)).collect();
        for (var, value) in vars {
            if !var.starts_with(ENV_PREFIX) {
                continue;
            }
            let name = by_env
                .get(&var)
                .ok_or_else(|| Failure::Usage(format!("unknown configuration variable {var}")))?;
            self.set(name, &value)?;
        }
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("configuration key {name} is not declared"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|e| Failure::Usage(format!("invalid value {raw:?} for {name}: {e}")))
    }

    /// `none` maps to `None`.
    pub fn get_opt<T: FromStr>(&self, name: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(name).eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            self.get(name).map(Some)
        }
    }

    pub fn path(&self, name: &str) -> Result<Option<PathBuf>, Failure> {
        self.get_opt(name)
    }

    /// Parse a kebab-case enum value through its serde name.
    pub fn get_enum<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T, Failure> {
        let raw = self.raw(name);
        serde_json::from_value(serde_json::Value::String(raw.to_string()))
            .map_err(|_| Failure::Usage(format!("invalid value {raw:?} for {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_has_a_parseable_default_and_appears_in_help() {
        let help = help_text();
        for k in KEYS {
            assert!(help.contains(k.name) && help.contains(k.default), "{}", k.name);
        }
    }

    #[test]
    fn layers_override_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("qrt.conf");
        std::fs::write(&file, "# comment\nbm25.k1 = 0.9\n[grpo]\nkl_beta = 0.5\n").unwrap();
        let mut c = AppConfig::default();
        c.apply_file(&file).unwrap();
        assert_eq!(c.get::<f64>("bm25.k1").unwrap(), 0.9);
        assert_eq!(c.get::<f64>("grpo.kl_beta").unwrap(), 0.5);
        c.apply_env([("QRT_BM25_K1".into(), "1.5".into()), ("HOME".into(), "/x".into())]).unwrap();
        assert_eq!(c.get::<f64>("bm25.k1").unwrap(), 1.5);
        c.set_pair("bm25.k1=2.0").unwrap();
        assert_eq!(c.get::<f64>("bm25.k1").unwrap(), 2.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut c = AppConfig::default();
        assert!(matches!(c.set_pair("bm25.k3=1"), Err(Failure::Usage(_))));
        assert!(matches!(c.apply_env([("QRT_NOPE".into(), "1".into())]), Err(Failure::Usage(_))));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("qrt.conf");
        std::fs::write(&file, "[bm25]\nk2 = 1\n").unwrap();
        assert!(matches!(c.apply_file(&file), Err(Failure::Usage(_))));
    }

    #[test]
    fn typed_access() {
        let c = AppConfig::default();
        assert_eq!(c.get_opt::<usize>("grpo.batch_size").unwrap(), None);
        assert_eq!(c.get_opt::<usize>("relevance.max_tokens").unwrap(), Some(512));
        let g: qrt_core::grpo::LossAggregation = c.get_enum("grpo.loss_aggregation").unwrap();
        assert_eq!(g, qrt_core::grpo::LossAggregation::GroupSum);
        assert!(c.get::<bool>("bm25.k1").is_err());
    }

    #[test]
    fn env_names() {
        assert_eq!(env_name("grpo.kl_beta"), "QRT_GRPO_KL_BETA");
    }
}
