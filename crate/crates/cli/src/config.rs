//! TOML application config. Environment variables override endpoint URLs and
//! the token; command-line flags override both.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use reflectionflow::backend::remote::{RemoteClient, RemoteConfig};
use reflectionflow::backend::sim::{Simulation, VerifierMode};
use reflectionflow::backend::{BackendBundle, ErrorModel, Role};
use reflectionflow::curation::CurationConfig;
use reflectionflow::engine::BudgetMode;
use reflectionflow::reward::{RewardModel, RewardVerifier};
use reflectionflow::vocab::Vocabulary;
use reflectionflow::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VerifierChoice {
    Oracle,
    #[default]
    Noisy,
    Bt,
    Remote,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Required whenever any role is simulated.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses one per core.
    pub jobs: usize,
    /// Vocabulary TOML; the bundled one when unset.
    pub vocab: Option<PathBuf>,
    pub backends: BackendsConfig,
    pub run: RunDefaults,
    pub curation: CurationConfig,
    pub eval: EvalDefaults,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub error_model: ErrorModel,
    pub verifier: VerifierChoice,
    /// Reward model checkpoint for `verifier = "bt"`.
    pub checkpoint: Option<PathBuf>,
    /// Role name (generator, corrector, reflector, verifier, refiner) to base URL.
    /// A role with a URL is remote; every other role is simulated.
    pub urls: BTreeMap<String, String>,
    pub timeout_ms: Option<u64>,
    pub max_attempts: Option<u32>,
    pub backoff_ms: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunDefaults {
    pub width: usize,
    pub depth: usize,
    pub reflection: bool,
    pub prompt_scaling: bool,
    pub budget_mode: BudgetMode,
}

impl Default for RunDefaults {
    fn default() -> Self {
        RunDefaults {
            width: 4,
            depth: 4,
            reflection: true,
            prompt_scaling: true,
            budget_mode: BudgetMode::TotalImages,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalDefaults {
    /// Suite file; the bundled 60-prompt suite when unset.
    pub suite: Option<PathBuf>,
    pub images_per_prompt: usize,
    pub budget: usize,
    /// Budgets of the plot-data sweep; empty skips the sweep.
    pub sweep: Vec<usize>,
    pub max_depth: usize,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        EvalDefaults {
            suite: None,
            images_per_prompt: 4,
            budget: 16,
            sweep: Vec::new(),
            max_depth: 4,
        }
    }
}

pub fn url_env(role: Role) -> String {
    format!("REFLECTIONFLOW_{}_URL", role.as_str().to_ascii_uppercase())
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => AppConfig::default(),
        };
        for role in Role::ALL {
            if let Ok(url) = std::env::var(url_env(role)) {
                if !url.is_empty() {
                    cfg.backends.urls.insert(role.as_str().to_string(), url);
                }
            }
        }
        Ok(cfg)
    }

    pub fn vocabulary(&self) -> anyhow::Result<Vocabulary> {
        Ok(match &self.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => Vocabulary::default(),
        })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for key in self.backends.urls.keys() {
            if !Role::ALL.iter().any(|r| r.as_str() == key) {
                return Err(Error::Config(format!("unknown backend role {key:?}")).into());
            }
        }
        let remote_verifier = self.backends.urls.contains_key(Role::Verifier.as_str());
        match (self.backends.verifier, remote_verifier) {
            (VerifierChoice::Remote, false) => {
                return Err(Error::Config("verifier = remote needs a verifier URL".into()).into())
            }
            (VerifierChoice::Oracle | VerifierChoice::Noisy | VerifierChoice::Bt, true) => {
                return Err(Error::Config("a verifier URL is set but the verifier is not remote".into()).into())
            }
            _ => {}
        }
        if self.backends.verifier == VerifierChoice::Bt && self.backends.checkpoint.is_none() {
            return Err(Error::Config("verifier = bt needs a checkpoint".into()).into());
        }
        self.backends.error_model.validate()?;
        Ok(())
    }

    fn any_simulated(&self) -> bool {
        Role::ALL.iter().any(|r| !self.backends.urls.contains_key(r.as_str()))
    }

    /// The run seed. Simulated backends need one.
    pub fn seed(&self) -> anyhow::Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None if self.any_simulated() => Err(Error::Config("--seed is required with simulated backends".into()).into()),
            None => Ok(0),
        }
    }

    fn remote(&self, role: Role) -> anyhow::Result<Option<RemoteClient>> {
        let Some(url) = self.backends.urls.get(role.as_str()) else {
            return Ok(None);
        };
        let mut rc = RemoteConfig::new(url.clone()).with_env_token();
        if let Some(t) = self.backends.timeout_ms {
            rc.timeout_ms = t;
        }
        if let Some(a) = self.backends.max_attempts {
            rc.max_attempts = a;
        }
        if let Some(b) = self.backends.backoff_ms {
            rc.backoff_ms = b;
        }
        Ok(Some(RemoteClient::new(role, rc)?))
    }

    pub fn bundle(&self, vocab: &Vocabulary) -> anyhow::Result<BackendBundle> {
        self.validate()?;
        let mode = match self.backends.verifier {
            VerifierChoice::Oracle => VerifierMode::Oracle,
            _ => VerifierMode::Noisy,
        };
        let mut b = Simulation::new(vocab.clone(), self.backends.error_model).bundle(mode);
        if let Some(c) = self.remote(Role::Generator)? {
            b.generator = Arc::new(c);
        }
        if let Some(c) = self.remote(Role::Corrector)? {
            b.corrector = Arc::new(c);
        }
        if let Some(c) = self.remote(Role::Reflector)? {
            b.reflector = Arc::new(c);
        }
        if let Some(c) = self.remote(Role::Verifier)? {
            b.verifier = Arc::new(c);
        }
        if let Some(c) = self.remote(Role::Refiner)? {
            b.refiner = Arc::new(c);
        }
        if self.backends.verifier == VerifierChoice::Bt {
            let path = self.backends.checkpoint.as_ref().expect("validated");
            let model = RewardModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            b.verifier = Arc::new(RewardVerifier::new(model, vocab.clone())?);
        }
        Ok(b)
    }
}

pub fn parse_sources(text: &str) -> anyhow::Result<Vec<reflectionflow::reward::PairSource>> {
    use reflectionflow::curation::TRIPLET_SOURCES;
    let mut out = Vec::new();
    for s in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match TRIPLET_SOURCES.iter().find(|t| t.as_str() == s) {
            Some(t) => out.push(*t),
            None => bail!(Error::Config(format!("unknown source {s:?}; expected rule, reward, longshort or edit"))),
        }
    }
    if out.is_empty() {
        bail!(Error::Config("--sources is empty".into()));
    }
    Ok(out)
}
