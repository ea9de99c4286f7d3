//! `key=value` parameters from config files and command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key any subcommand understands. A shared config file may carry keys
/// for several subcommands; anything outside this list is a typo.
const KNOWN: &[&str] = &[
    // suite
    "heads", "train_prompts", "eval_prompts", "n_keys", "n_queries", "seed", "force",
    // head spec
    "d", "n_clusters", "key_center_scale", "center_norm_spread", "key_mean", "key_noise", "positional_norm",
    "query_offset", "query_content", "query_noise", "local_fraction", "local_span", "sink_norm", "drift_rate",
    "planted_longrange_fraction", "planted_strength", "planted_min_gap", "ood_shift", "prompt_concentration", "rope_base",
    // k-means and index
    "c", "iters", "max_points_per_centroid", "roped",
    // query model
    "hidden", "lr", "epochs", "batch_size", "long_range_threshold",
    // experiments
    "method", "methods", "ells", "ell", "fractions", "bins", "lsh", "lsh_threshold", "windows", "hash_bits",
    "reformer_buckets", "reformer_rounds", "sink", "recent", "group_size", "block_size", "max_queries", "repetitions",
    "cs",
    // diagnostics
    "span_k", "sample_size", "shifts", "n_ood_queries",
];

/// Keys that are fed to [`saap_core::synth::HeadSpec::set`] unchanged.
pub const HEAD_KEYS: &[&str] = &[
    "d", "n_clusters", "key_center_scale", "center_norm_spread", "key_mean", "key_noise", "positional_norm",
    "query_offset", "query_content", "query_noise", "local_fraction", "local_span", "sink_norm", "drift_rate",
    "planted_longrange_fraction", "planted_strength", "planted_min_gap", "ood_shift", "prompt_concentration", "rope_base",
];

/// Keys fed to [`saap_core::harness::ExperimentConfig::set`].
pub const EXPERIMENT_KEYS: &[&str] = &[
    "method", "ells", "ell", "fractions", "bins", "lsh", "lsh_threshold", "windows", "hash_bits", "reformer_buckets",
    "reformer_rounds", "sink", "recent", "group_size", "block_size", "max_queries", "repetitions", "seed",
];

#[derive(Debug, Default, Clone)]
pub struct Params {
    map: BTreeMap<String, String>,
}

impl Params {
    /// Reads `key=value` lines; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut p = Params::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            p.insert(k.trim(), v.trim())?;
        }
        Ok(p)
    }

    /// Adds or overrides one entry.
    pub fn insert(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.replace('-', "_");
        if !KNOWN.contains(&key.as_str()) {
            return Err(CliError::Config(format!("unknown parameter {key:?}")));
        }
        self.map.insert(key, value.to_string());
        Ok(())
    }

    /// Parses `key=value` from a `--set` flag.
    pub fn insert_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got {pair:?}")))?;
        self.insert(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {s:?}"))))
                .collect(),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            None => Ok(false),
            Some("1" | "true" | "yes" | "") => Ok(true),
            Some("0" | "false" | "no") => Ok(false),
            Some(v) => Err(CliError::Config(format!("{key}: expected a boolean, got {v:?}"))),
        }
    }

    /// Entries among `keys`, in key order.
    pub fn subset<'a>(&'a self, keys: &'a [&str]) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.map.iter().filter(|(k, _)| keys.contains(&k.as_str())).map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut p = Params::parse("# suite\nn_keys = 4096\n\nells=1,2, 4 # probes\n").unwrap();
        assert_eq!(p.get("n_keys"), Some("4096"));
        assert_eq!(p.list_or::<usize>("ells", vec![]).unwrap(), vec![1, 2, 4]);
        p.insert_pair("n-keys=8192").unwrap();
        assert_eq!(p.parse_or("n_keys", 0usize).unwrap(), 8192);
        assert_eq!(p.parse_or("c", 7usize).unwrap(), 7);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Params::parse("bogus=1").is_err());
        assert!(Params::parse("n_keys").is_err());
        let p = Params::parse("n_keys=x").unwrap();
        assert!(p.parse_or("n_keys", 0usize).is_err());
        assert!(Params::parse("roped=maybe").unwrap().flag("roped").is_err());
    }
}
