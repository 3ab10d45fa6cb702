use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clisa::eval::{Method, Protocol, SynthSpec};
use clisa::predict::{ClassifierConfig, FeatureConfig};
use clisa::preprocess::PreprocessConfig;
use clisa::Hyperparams;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// 32-bit training.
    #[default]
    F32,
    /// 64-bit verification mode.
    F64,
}

/// Effective configuration of a run, written to `run.json`. Every section
/// defaults to the published settings; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub precision: Precision,
    pub protocol: Protocol,
    pub methods: Vec<Method>,
    pub ablation_counts: Vec<usize>,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub hyperparams: Hyperparams,
    pub features: FeatureConfig,
    pub classifier: ClassifierConfig,
    pub trial_vote: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            seed: 0,
            precision: Precision::F32,
            protocol: Protocol::Kfold { k: 10 },
            methods: vec![Method::Clisa, Method::RawDe],
            ablation_counts: vec![0, 2, 4, 8],
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            hyperparams: Hyperparams::default(),
            features: FeatureConfig::default(),
            classifier: ClassifierConfig::default(),
            trial_vote: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn dataset(&self) -> Result<&Path> {
        match &self.dataset {
            Some(p) => Ok(p),
            None => bail!("no dataset given (use --data or set `dataset` in the config)"),
        }
    }
}

/// `kfold:K`, `loso`, `generalize:K:FRAC` or `generalize:loso:FRAC`.
pub fn parse_protocol(s: &str) -> Result<Protocol, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| format!("bad fold count {v:?}"))
    };
    match parts.as_slice() {
        ["loso"] => Ok(Protocol::Loso),
        ["kfold", k] => Ok(Protocol::Kfold { k: num(k)? }),
        ["generalize", k, frac] => {
            let k = if *k == "loso" { None } else { Some(num(k)?) };
            let train_trial_frac = frac
                .parse()
                .map_err(|_| format!("bad training trial share {frac:?}"))?;
            Ok(Protocol::Generalize {
                k,
                train_trial_frac,
            })
        }
        ["generalize"] => Ok(Protocol::Generalize {
            k: None,
            train_trial_frac: 2.0 / 3.0,
        }),
        _ => Err(format!(
            "unknown protocol {s:?}; use kfold:K, loso or generalize:K|loso:FRAC"
        )),
    }
}

pub fn parse_method(s: &str) -> Result<Method, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown method {s:?}; use clisa, raw_de or random_encoder"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocols_parse() {
        assert_eq!(parse_protocol("kfold:4").unwrap(), Protocol::Kfold { k: 4 });
        assert_eq!(parse_protocol("loso").unwrap(), Protocol::Loso);
        assert_eq!(
            parse_protocol("generalize:4:0.5").unwrap(),
            Protocol::Generalize {
                k: Some(4),
                train_trial_frac: 0.5
            }
        );
        assert!(parse_protocol("kfold").is_err());
        assert_eq!(parse_method("raw-de").unwrap(), Method::RawDe);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"hyperparams": {"k3": 1}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"hyperparams": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.hyperparams.epochs, 3);
        assert_eq!(partial.hyperparams.k1, 16);
    }
}
