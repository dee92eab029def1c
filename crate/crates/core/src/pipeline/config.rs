//! Run configuration with file and flag layering.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consolidation::{
    ConsensusConfig, Strategy, DEFAULT_OMEGA1, DEFAULT_OMEGA2, DEFAULT_TAU,
};
use crate::dape::DEFAULT_MAX_GENERATIONS;
use crate::lvlm_client::{MockNoise, ModelEndpoint};
use crate::viewgen::DEFAULT_VIEW_COUNT;

pub const DEFAULT_PARALLELISM: usize = 32;
pub const LINGUISTIC_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMode {
    /// Perturbed views, back-projected.
    #[default]
    Visual,
    /// Repeated sampling of the unperturbed image at high temperature.
    Linguistic,
}

impl std::str::FromStr for UncertaintyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "visual" => Ok(UncertaintyMode::Visual),
            "linguistic" => Ok(UncertaintyMode::Linguistic),
            other => Err(format!(
                "unknown uncertainty mode {other:?} (expected visual or linguistic)"
            )),
        }
    }
}

/// Settings of the simulated model used in mock runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    pub jitter_px: f64,
    pub hallucination_prob: f64,
    pub miss_prob: f64,
    /// Per-image localization bias shared by all views.
    pub image_jitter_px: f64,
    /// Extra jitter for calls at positive temperature.
    pub sampling_jitter_px: f64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            jitter_px: 2.0,
            hallucination_prob: 0.2,
            miss_prob: 0.0,
            image_jitter_px: 0.0,
            sampling_jitter_px: 4.0,
        }
    }
}

impl MockSettings {
    pub fn noise(&self) -> MockNoise {
        MockNoise::new(self.jitter_px, self.hallucination_prob, self.miss_prob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub target: Option<ModelEndpoint>,
    pub meta: Option<ModelEndpoint>,
    /// Number of perturbed views M.
    pub views: usize,
    pub tau: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub seed: Option<u64>,
    pub max_generations: usize,
    pub strategy: Strategy,
    pub uncertainty: UncertaintyMode,
    /// Upper bound on concurrent model calls.
    pub parallelism: usize,
    pub output_dir: Option<PathBuf>,
    /// Use this instruction directly instead of searching for one.
    pub prompt: Option<String>,
    /// Score candidate prompts through views and consolidation rather than
    /// one reference call per image.
    pub score_with_pipeline: bool,
    /// Decoding temperature of the target model outside linguistic sampling.
    pub target_temperature: f64,
    /// Replace both models with the built-in simulator.
    pub mock: Option<MockSettings>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target: None,
            meta: None,
            views: DEFAULT_VIEW_COUNT,
            tau: DEFAULT_TAU,
            omega1: DEFAULT_OMEGA1,
            omega2: DEFAULT_OMEGA2,
            seed: None,
            max_generations: DEFAULT_MAX_GENERATIONS,
            strategy: Strategy::Rhc,
            uncertainty: UncertaintyMode::Visual,
            parallelism: DEFAULT_PARALLELISM,
            output_dir: None,
            prompt: None,
            score_with_pipeline: false,
            target_temperature: 0.0,
            mock: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    /// Seeded simulator run with default settings.
    pub fn mock(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            mock: Some(MockSettings::default()),
            ..Self::default()
        }
    }

    /// Read a JSON config; absent keys keep their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn consensus(&self) -> ConsensusConfig {
        ConsensusConfig {
            tau: self.tau,
            omega1: self.omega1,
            omega2: self.omega2,
            views: self.views,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.mock.is_some()
    }

    /// The seed in effect (mock runs must set one explicitly).
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.consensus()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be positive".into()));
        }
        if self.target_temperature.is_nan() || self.target_temperature < 0.0 {
            return Err(ConfigError::Invalid(
                "target temperature must be non-negative".into(),
            ));
        }
        if self.is_mock() {
            if self.seed.is_none() {
                return Err(ConfigError::Invalid(
                    "mock runs require an explicit seed".into(),
                ));
            }
        } else {
            let target = self
                .target
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("no target endpoint configured".into()))?;
            target.validate().map_err(ConfigError::Invalid)?;
            let needs_meta = self.prompt.is_none() && self.max_generations > 0;
            match &self.meta {
                Some(meta) => meta.validate().map_err(ConfigError::Invalid)?,
                None if needs_meta => {
                    return Err(ConfigError::Invalid(
                        "no meta endpoint configured (set one, or pass a fixed prompt)".into(),
                    ))
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Canonical JSON of everything except the output location.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        serde_json::to_string(&copy).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// Command-line values; each one present overrides the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub target_url: Option<String>,
    pub target_model: Option<String>,
    pub meta_url: Option<String>,
    pub meta_model: Option<String>,
    pub views: Option<usize>,
    pub tau: Option<f64>,
    pub omega1: Option<f64>,
    pub omega2: Option<f64>,
    pub seed: Option<u64>,
    pub max_generations: Option<usize>,
    pub strategy: Option<Strategy>,
    pub uncertainty: Option<UncertaintyMode>,
    pub parallelism: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub prompt: Option<String>,
    pub score_with_pipeline: Option<bool>,
    pub max_tokens: Option<u32>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub mock: Option<bool>,
    pub jitter_px: Option<f64>,
    pub hallucination_prob: Option<f64>,
    pub miss_prob: Option<f64>,
}

fn endpoint_slot(
    slot: &mut Option<ModelEndpoint>,
    url: &Option<String>,
    model: &Option<String>,
    meta: bool,
) {
    if url.is_none() && model.is_none() {
        return;
    }
    let ep = slot.get_or_insert_with(|| {
        if meta {
            ModelEndpoint::meta("", "")
        } else {
            ModelEndpoint::new("", "")
        }
    });
    if let Some(u) = url {
        ep.base_url = u.clone();
    }
    if let Some(m) = model {
        ep.model = m.clone();
    }
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        endpoint_slot(&mut cfg.target, &self.target_url, &self.target_model, false);
        endpoint_slot(&mut cfg.meta, &self.meta_url, &self.meta_model, true);
        for ep in [cfg.target.as_mut(), cfg.meta.as_mut()]
            .into_iter()
            .flatten()
        {
            if let Some(t) = self.max_tokens {
                ep.max_tokens = t;
            }
            if let Some(t) = self.timeout_secs {
                ep.timeout_secs = t;
            }
            if let Some(r) = self.max_retries {
                ep.max_retries = r;
            }
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(
            views,
            tau,
            omega1,
            omega2,
            max_generations,
            strategy,
            uncertainty,
            parallelism,
            score_with_pipeline
        );
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.output_dir.is_some() {
            cfg.output_dir = self.output_dir.clone();
        }
        if self.prompt.is_some() {
            cfg.prompt = self.prompt.clone();
        }
        match self.mock {
            Some(true) => {
                cfg.mock.get_or_insert_with(MockSettings::default);
            }
            Some(false) => cfg.mock = None,
            None => {}
        }
        if let Some(mock) = cfg.mock.as_mut() {
            if let Some(v) = self.jitter_px {
                mock.jitter_px = v;
            }
            if let Some(v) = self.hallucination_prob {
                mock.hallucination_prob = v;
            }
            if let Some(v) = self.miss_prob {
                mock.miss_prob = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!(c.views, 7);
        assert_eq!(c.tau, 0.1);
        assert_eq!((c.omega1, c.omega2), (0.6, 0.4));
        assert_eq!(c.parallelism, 32);
        assert_eq!(c.max_generations, 10);
        assert_eq!(ModelEndpoint::new("http://h", "m").max_tokens, 1024);
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"views": 5, "tau": 0.2, "strategy": "SA"}"#).unwrap();
        let mut cfg = RunConfig::load(&path).unwrap();
        assert_eq!((cfg.views, cfg.tau, cfg.strategy), (5, 0.2, Strategy::Sa));
        assert_eq!(cfg.omega1, 0.6);
        ConfigOverrides {
            views: Some(3),
            strategy: Some(Strategy::Wa),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!((cfg.views, cfg.tau, cfg.strategy), (3, 0.2, Strategy::Wa));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::mock(1).validate().is_ok());
        let mut c = RunConfig::mock(1);
        c.seed = None;
        assert!(c.validate().unwrap_err().to_string().contains("seed"));
        assert!(RunConfig::default()
            .validate()
            .unwrap_err()
            .to_string()
            .contains("target"));
        let mut c = RunConfig {
            target: Some(ModelEndpoint::new("http://h", "m")),
            ..RunConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("meta"));
        c.prompt = Some("find it".into());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::mock(3);
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
        assert_ne!(a.config_hash(), RunConfig::mock(4).config_hash());
    }

    #[test]
    fn endpoint_overrides() {
        let mut c = RunConfig::default();
        ConfigOverrides {
            target_url: Some("http://t".into()),
            target_model: Some("vl".into()),
            max_tokens: Some(64),
            ..Default::default()
        }
        .apply(&mut c);
        let t = c.target.unwrap();
        assert_eq!(
            (t.base_url.as_str(), t.model.as_str(), t.max_tokens),
            ("http://t", "vl", 64)
        );
        assert!(c.meta.is_none());
    }
}
