//! Engine configuration loaded from TOML.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use skillsynth_core::pipeline::PipelineSettings;
use skillsynth_core::pool::LabelFilter;
use skillsynth_core::synthesis::{LeakPolicy, LeakThresholds, SynthesisSettings};

/// Looked up in the working directory when `--config` is absent.
pub const DEFAULT_CONFIG_FILE: &str = "skillsynth.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub model: String,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub key_env: String,
    pub max_concurrent: usize,
    pub timeout_secs: u64,
    pub retry_backoff_ms: u64,
}

impl Default for ProviderSpec {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            model: String::new(),
            endpoint: String::new(),
            key_env: String::new(),
            max_concurrent: 4,
            timeout_secs: 120,
            retry_backoff_ms: 500,
        }
    }
}

fn is_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase() || c == '_')
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

impl ProviderSpec {
    fn validate(&self, role: &str) -> Result<()> {
        if self.max_concurrent == 0 {
            bail!("providers.{role}.max_concurrent must be at least 1");
        }
        if self.kind == ProviderKind::Http {
            if self.model.is_empty() {
                bail!("providers.{role}: http provider needs `model`");
            }
            if self.endpoint.is_empty() {
                bail!("providers.{role}: http provider needs `endpoint`");
            }
            if self.key_env.is_empty() {
                bail!("providers.{role}: http provider needs `key_env` naming an environment variable");
            }
            if !is_env_name(&self.key_env) {
                bail!("providers.{role}.key_env must be an environment variable name like OPENAI_API_KEY, not a key");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Providers {
    pub embedder: ProviderSpec,
    pub synthesizer: ProviderSpec,
    pub solver: ProviderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub filter: LabelFilter,
    pub use_summary: bool,
    /// Mock embedder dimension.
    pub mock_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 3, filter: LabelFilter::FailureOnly, use_summary: false, mock_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    pub synthesis: f64,
    pub solve: f64,
    pub pass_at_k: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { synthesis: 0.0, solve: 0.0, pass_at_k: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub evidence_chars: usize,
    pub skill_tokens: u32,
    pub solve_tokens: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { evidence_chars: 2000, skill_tokens: 1200, solve_tokens: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeakConfig {
    pub policy: LeakPolicy,
    pub min_overlap_tokens: usize,
    pub min_numeric_digits: usize,
}

impl Default for LeakConfig {
    fn default() -> Self {
        Self { policy: LeakPolicy::RejectOnLeak, min_overlap_tokens: 12, min_numeric_digits: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    /// Solver samples per task; above 1 the pass@k temperature applies.
    pub samples: usize,
    pub retrieval: RetrievalConfig,
    pub temperatures: Temperatures,
    pub budgets: Budgets,
    pub leak: LeakConfig,
    pub providers: Providers,
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // Only the message: the parser's snippet could echo a pasted secret.
        let cfg: EngineConfig =
            toml::from_str(text).map_err(|e| anyhow!("invalid configuration: {}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `explicit` if given, else the default file if present, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path: Option<PathBuf> = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => Some(PathBuf::from(DEFAULT_CONFIG_FILE)).filter(|p| p.exists()),
        };
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.k == 0 {
            bail!("retrieval.k must be at least 1");
        }
        if self.retrieval.mock_dim == 0 {
            bail!("retrieval.mock_dim must be at least 1");
        }
        let t = &self.temperatures;
        for (name, v) in [("synthesis", t.synthesis), ("solve", t.solve), ("pass_at_k", t.pass_at_k)] {
            if v.is_nan() || v < 0.0 {
                bail!("temperatures.{name} must be non-negative");
            }
        }
        if self.samples == 0 {
            bail!("samples must be at least 1");
        }
        if self.budgets.evidence_chars < skillsynth_core::pool::MIN_COMPACTION_BUDGET {
            bail!("budgets.evidence_chars must be at least {}", skillsynth_core::pool::MIN_COMPACTION_BUDGET);
        }
        self.providers.embedder.validate("embedder")?;
        self.providers.synthesizer.validate("synthesizer")?;
        self.providers.solver.validate("solver")?;
        Ok(())
    }

    /// Worker bound: the tightest provider rate limit.
    pub fn workers(&self) -> usize {
        let p = &self.providers;
        p.embedder.max_concurrent.min(p.synthesizer.max_concurrent).min(p.solver.max_concurrent)
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        let solve_temperature = if self.samples > 1 { self.temperatures.pass_at_k } else { self.temperatures.solve };
        PipelineSettings {
            k: self.retrieval.k,
            filter: self.retrieval.filter,
            evidence_budget: self.budgets.evidence_chars,
            synthesis: SynthesisSettings {
                temperature: self.temperatures.synthesis,
                max_tokens: self.budgets.skill_tokens,
                policy: self.leak.policy,
                thresholds: LeakThresholds {
                    min_overlap_tokens: self.leak.min_overlap_tokens,
                    min_numeric_digits: self.leak.min_numeric_digits,
                },
                ..SynthesisSettings::default()
            },
            solve_temperature,
            samples: self.samples,
            solve_max_tokens: self.budgets.solve_tokens,
            use_summary: self.retrieval.use_summary,
            random_seed: self.seed,
            workers: self.workers(),
        }
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 1,
            retrieval: RetrievalConfig::default(),
            temperatures: Temperatures::default(),
            budgets: Budgets::default(),
            leak: LeakConfig::default(),
            providers: Providers::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = EngineConfig::parse("").unwrap();
        assert_eq!(cfg.retrieval.k, 3);
        assert_eq!(cfg.retrieval.filter, LabelFilter::FailureOnly);
        assert_eq!(cfg.temperatures.pass_at_k, 0.7);
        assert_eq!(cfg.pipeline_settings().solve_temperature, 0.0);
    }

    #[test]
    fn sampling_uses_pass_at_k_temperature() {
        let cfg = EngineConfig::parse("samples = 3").unwrap();
        assert_eq!(cfg.pipeline_settings().solve_temperature, 0.7);
        assert_eq!(cfg.pipeline_settings().samples, 3);
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(EngineConfig::parse("[retrieval]\nk = 0").is_err());
        assert!(EngineConfig::parse("[temperatures]\nsolve = -0.1").is_err());
        assert!(EngineConfig::parse("[retrieval]\nfilter = \"sometimes\"").is_err());
        assert!(EngineConfig::parse("[budgets]\nevidence_chars = 10").is_err());
    }

    #[test]
    fn http_needs_endpoint_and_key_variable() {
        let base = "[providers.solver]\nkind = \"http\"\nmodel = \"m\"\n";
        assert!(EngineConfig::parse(base).is_err());
        assert!(EngineConfig::parse(&format!("{base}endpoint = \"http://x\"\n")).is_err());
        assert!(EngineConfig::parse(&format!("{base}endpoint = \"http://x\"\nkey_env = \"sk-live-abc\"\n")).is_err());
        EngineConfig::parse(&format!("{base}endpoint = \"http://x\"\nkey_env = \"SOLVER_KEY\"\n")).unwrap();
    }

    #[test]
    fn inline_secrets_are_rejected() {
        let text = "[providers.solver]\nkind = \"http\"\napi_key = \"sk-123\"\n";
        let err = format!("{:#}", EngineConfig::parse(text).unwrap_err());
        assert!(err.contains("api_key"), "{err}");
        assert!(!err.contains("sk-123"), "{err}");
    }

    #[test]
    fn mock_ignores_endpoint_and_key() {
        EngineConfig::parse("[providers.embedder]\nkind = \"mock\"\nendpoint = \"\"\n").unwrap();
    }
}
