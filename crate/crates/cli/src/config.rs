use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub assess: AssessConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub sample_n: Option<usize>,
    pub seed: Option<u64>,
    pub communities: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub threshold: Option<f64>,
    pub min_rounds: Option<u32>,
    pub consecutive_hits: Option<u32>,
    pub scorer_url: Option<String>,
    pub lexicon: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoints: Option<Vec<u32>>,
    pub speed_p: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssessConfig {
    pub cutoffs: Option<[u32; 3]>,
}

impl Config {
    /// TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
            .with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: Config = if json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text)?
        };
        if let Some(t) = cfg.stream.timeout_secs.or(cfg.gateway.timeout_secs) {
            if !(t.is_finite() && t > 0.0) {
                bail!("timeout_secs must be a positive number");
            }
        }
        if cfg.stream.max_in_flight == Some(0) || cfg.gateway.max_in_flight == Some(0) {
            bail!("max_in_flight must be at least 1");
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_known_sections() {
        let cfg = Config::parse(
            "[ingest]\nsample_n = 10\nseed = 7\n[stream]\nthreshold = 0.4\n[assess]\ncutoffs = [10, 19, 30]\n",
            false,
        )
        .unwrap();
        assert_eq!(cfg.ingest.sample_n, Some(10));
        assert_eq!(cfg.stream.threshold, Some(0.4));
        assert_eq!(cfg.assess.cutoffs, Some([10, 19, 30]));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(Config::parse("[stream]\nthreshhold = 0.4\n", false).is_err());
        assert!(Config::parse("[extra]\n", false).is_err());
        assert!(Config::parse(r#"{"eval": {"speed": 1}}"#, true).is_err());
        assert!(Config::parse("[gateway]\nmax_in_flight = 0\n", false).is_err());
    }
}
