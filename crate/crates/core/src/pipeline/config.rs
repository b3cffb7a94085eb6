use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::cfgen::{DEFAULT_CANDIDATE_POOL, DEFAULT_DEDUP_RETRIES, DEFAULT_K, DEFAULT_V};
use crate::domain::Aggregation;
use crate::metrics::{NoiseConfig, DEFAULT_SAMPLES, DEFAULT_SIGMA};
use crate::rng::derive_seed;

use super::PipelineError;

/// Environment variable overriding `backend.base_url`.
pub const BACKEND_URL_ENV: &str = "SCENE_BACKEND_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub timeout_seconds: f64,
    pub max_batch: usize,
    pub retries: usize,
    pub max_in_flight: usize,
    /// Mock fixture file, for `kind = "mock"`.
    pub fixtures: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let d = BackendDescriptor::default();
        BackendConfig {
            kind: BackendKind::Http,
            base_url: d.base_url,
            timeout_seconds: d.timeout_seconds,
            max_batch: d.max_batch,
            retries: d.retries,
            max_in_flight: d.max_in_flight,
            fixtures: None,
        }
    }
}

impl BackendConfig {
    pub fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            base_url: self.base_url.clone(),
            timeout_seconds: self.timeout_seconds,
            max_batch: self.max_batch,
            retries: self.retries,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfidelityConfig {
    pub enabled: bool,
    pub sigma: f64,
    pub samples: usize,
    /// Defaults to a value derived from the run seed.
    pub seed: Option<u64>,
    /// Measure the log-odds of the predicted class instead of its probability.
    pub on_logit: bool,
}

impl Default for InfidelityConfig {
    fn default() -> Self {
        InfidelityConfig {
            enabled: true,
            sigma: DEFAULT_SIGMA,
            samples: DEFAULT_SAMPLES,
            seed: None,
            on_logit: false,
        }
    }
}

/// Everything a run needs. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub attributions: PathBuf,
    pub seed: u64,
    /// Tokens masked per instance.
    pub v: usize,
    /// Counterfactuals per instance.
    pub k: usize,
    /// Fill-mask predictions requested per mask before filtering.
    pub candidate_pool: usize,
    pub dedup_retries: usize,
    pub rank_by_abs: bool,
    pub aggregations: Vec<Aggregation>,
    /// Methods to evaluate; empty means every method in the attribution file.
    pub methods: Vec<String>,
    pub workers: usize,
    pub infidelity: InfidelityConfig,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            attributions: PathBuf::from("attributions.jsonl"),
            seed: 0,
            v: DEFAULT_V,
            k: DEFAULT_K,
            candidate_pool: DEFAULT_CANDIDATE_POOL,
            dedup_retries: DEFAULT_DEDUP_RETRIES,
            rank_by_abs: false,
            aggregations: Aggregation::ALL.to_vec(),
            methods: Vec::new(),
            workers: 4,
            infidelity: InfidelityConfig::default(),
            backend: BackendConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML config and resolves its paths relative to the file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.attributions);
        if let Some(f) = self.backend.fixtures.as_mut() {
            fix(f);
        }
    }

    /// Applies [`BACKEND_URL_ENV`] if set.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
            if !url.is_empty() {
                self.backend.base_url = url;
            }
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            sigma: self.infidelity.sigma,
            samples: self.infidelity.samples,
            seed: self
                .infidelity
                .seed
                .unwrap_or_else(|| derive_seed(self.seed, &["infidelity"])),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.v == 0 {
            return err("v must be at least 1".into());
        }
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if self.candidate_pool == 0 {
            return err("candidate_pool must be at least 1".into());
        }
        if self.aggregations.is_empty() {
            return err("no aggregations configured".into());
        }
        if self.workers == 0 {
            return err("workers must be at least 1".into());
        }
        if self.infidelity.enabled {
            self.noise().validate().map_err(PipelineError::Config)?;
        }
        match self.backend.kind {
            BackendKind::Http => self.backend.descriptor().validate().map_err(PipelineError::Config),
            BackendKind::Mock if self.backend.fixtures.is_none() => {
                err("backend.kind = \"mock\" needs backend.fixtures".into())
            }
            BackendKind::Mock => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!((c.v, c.k, c.candidate_pool), (5, 10, 20));
        assert_eq!(c.infidelity.sigma, 0.01);
        assert_eq!(c.infidelity.samples, 50);
        assert!(!c.rank_by_abs);
        assert_eq!(c.dedup_retries, 10);
        assert_eq!(c.aggregations, Aggregation::ALL);
    }

    #[test]
    fn parses_and_resolves() {
        let mut c = RunConfig::from_toml(
            r#"
            corpus = "data/c.jsonl"
            attributions = "/abs/a.jsonl"
            seed = 7
            v = 1
            aggregations = ["l2"]
            [infidelity]
            sigma = 0.1
            [backend]
            kind = "mock"
            fixtures = "mock.json"
            "#,
        )
        .unwrap();
        c.resolve_paths(Path::new("/runs"));
        assert_eq!(c.corpus, PathBuf::from("/runs/data/c.jsonl"));
        assert_eq!(c.attributions, PathBuf::from("/abs/a.jsonl"));
        assert_eq!(c.backend.fixtures, Some(PathBuf::from("/runs/mock.json")));
        assert_eq!(c.aggregations, [Aggregation::L2]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("vee = 3").is_err());
        let c = RunConfig::from_toml("v = 0").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml("[infidelity]\nsigma = -1").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml("[backend]\nkind = \"mock\"").unwrap();
        assert!(c.validate().is_err());
    }
}
