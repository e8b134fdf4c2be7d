//! Backend selection and the service configuration file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hintkit_core::gateway::{Backend, HttpBackendConfig, MockBackend, OpenAiBackend, PricingTable};
use hintkit_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

/// Exactly one active backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSpec {
    /// Scripted responses from a JSON file.
    Mock { script: PathBuf },
    /// Any OpenAI-compatible chat completions endpoint.
    Openai(HttpBackendConfig),
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn Backend>> {
        match self {
            BackendSpec::Mock { script } => {
                let mock = MockBackend::load(script).with_context(|| format!("loading mock script {}", script.display()))?;
                for w in mock.warnings() {
                    tracing::warn!(script = %script.display(), "{w}");
                }
                Ok(Box::new(mock))
            }
            BackendSpec::Openai(cfg) => Ok(Box::new(OpenAiBackend::new(cfg.clone())?)),
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let BackendSpec::Mock { script } = self {
            *script = base.join(&*script);
        }
    }
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Corpus directories whose tasks are served; task ids must be unique
    /// across them.
    pub corpora: Vec<PathBuf>,
    pub backend: BackendSpec,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<PathBuf>,
    /// Origins allowed by CORS; empty allows none.
    #[serde(default)]
    pub cors_allow_origins: Vec<String>,
    /// Environment variable holding the operator bearer token. Without it
    /// the operator route is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_token_env: Option<String>,
    /// Opt-in JSONL file receiving submitted programs. Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_log: Option<PathBuf>,
    /// Concurrent hint pipelines across all requests.
    #[serde(default = "default_hint_slots")]
    pub hint_slots: usize,
}

fn default_hint_slots() -> usize {
    4
}

impl ServiceConfig {
    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut cfg.corpora {
            *c = base.join(&*c);
        }
        cfg.backend.resolve(base);
        if let Some(p) = &mut cfg.pricing {
            *p = base.join(&*p);
        }
        if let Some(p) = &mut cfg.audit_log {
            *p = base.join(&*p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() {
            bail!("at least one corpus is required");
        }
        if self.hint_slots == 0 {
            bail!("hint_slots must be at least 1");
        }
        self.pipeline.validate()?;
        Ok(())
    }

    pub fn pricing_table(&self) -> Result<PricingTable> {
        match &self.pricing {
            Some(p) => Ok(PricingTable::load(p)?),
            None => Ok(PricingTable::default()),
        }
    }
}
