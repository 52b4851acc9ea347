//! Run configuration: JSON config files, flag overrides, content hashing.
//!
//! Precedence is flags over file over defaults. The config hash covers only
//! fields that influence computed numbers — thread counts and output paths
//! are excluded so reruns on different machines produce identical files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mixedboot_core::engines::StatisticPlugin;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => bail!("unknown format '{other}' (expected csv or json)"),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// Everything a JSON config file may set; each field has a flag of the same
/// name that overrides it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<String>,
    pub output: Option<String>,
    pub method: Option<Vec<String>>,
    pub b: Option<usize>,
    pub r: Option<usize>,
    pub level: Option<f64>,
    pub seed: Option<u64>,
    pub criterion: Option<String>,
    pub format: Option<String>,
    pub stat: Option<Vec<String>>,
    pub preset: Option<String>,
    pub scenario: Option<String>,
    pub threads: Option<usize>,
    pub dump_replicates: Option<String>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("config file {} is not valid", path.display()))
}

/// The fully resolved, semantics-affecting settings of one run. Serialized
/// canonically (declaration order) to compute the config hash stamped into
/// every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<String>,
    pub methods: Vec<String>,
    pub b: usize,
    pub r: usize,
    pub level: f64,
    pub seed: u64,
    pub criterion: String,
    pub format: String,
    pub stats: Vec<String>,
    pub preset: Option<String>,
    pub scenario: Option<String>,
    pub dump_replicates: bool,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

/// Parse a `--stat name=c0,c1,...` argument into a linear-combination
/// statistic.
pub fn parse_stat_spec(spec: &str) -> Result<StatisticPlugin> {
    let Some((name, coefs)) = spec.split_once('=') else {
        bail!("statistic spec '{spec}' must look like name=c0,c1,...");
    };
    let name = name.trim();
    if name.is_empty() {
        bail!("statistic spec '{spec}' has an empty name");
    }
    if name == "lambda" {
        bail!("statistic name 'lambda' is reserved for the built-in ratio");
    }
    let coefficients = coefs
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .with_context(|| format!("statistic '{name}': bad coefficient '{c}'"))
        })
        .collect::<Result<Vec<f64>>>()?;
    if coefficients.is_empty() {
        bail!("statistic '{name}' needs at least one coefficient");
    }
    Ok(StatisticPlugin::linear_combo(name, coefficients))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_and_threads_but_not_seed() {
        let mut config = RunConfig {
            command: "bootstrap".into(),
            input: Some("a.csv".into()),
            methods: vec!["preb1".into()],
            b: 500,
            r: 0,
            level: 0.95,
            seed: 7,
            criterion: "reml".into(),
            format: "csv".into(),
            stats: vec![],
            preset: None,
            scenario: None,
            dump_replicates: false,
        };
        let h1 = config.hash();
        config.seed = 8;
        let h2 = config.hash();
        assert_ne!(h1, h2);
        assert_eq!(h1.len(), 16);
    }

    #[test]
    fn stat_specs_parse_and_reject_garbage() {
        let plugin = parse_stat_spec("sate=0.5,0.5").unwrap();
        assert_eq!(plugin.name, "sate");
        assert!(parse_stat_spec("no-equals").is_err());
        assert!(parse_stat_spec("=1,2").is_err());
        assert!(parse_stat_spec("lambda=1").is_err());
        assert!(parse_stat_spec("w=1,oops").is_err());
    }

    #[test]
    fn file_config_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"b": 200, "bee": 1}"#).unwrap();
        assert!(load_file_config(&path).is_err());
        fs::write(&path, r#"{"b": 200, "seed": 3}"#).unwrap();
        let config = load_file_config(&path).unwrap();
        assert_eq!(config.b, Some(200));
        assert_eq!(config.seed, Some(3));
    }
}
