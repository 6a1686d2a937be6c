//! HTTP client for remote backends.
//!
//! Every role posts a wire envelope to `<base_url><endpoint>`. Transport
//! errors, 5xx and 429 are retried with exponential backoff; other statuses
//! and schema errors fail at once. Seeds travel in the request body, so a
//! retried call is idempotent.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{self, Envelope, WireRequest};
use super::{
    BackendKind, CorrectRequest, Corrector, GenerateRequest, Generator, PromptRefiner, RefineRequest, RefinedPrompt,
    Reflection, ReflectRequest, Reflector, Role, Verifier, VerifierReport, VerifyRequest,
};
use crate::error::{Error, Result};
use crate::scene::SceneGraph;
use crate::templates;

pub const TOKEN_ENV: &str = "REFLECTIONFLOW_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    /// Sent as `Authorization: Bearer <token>`.
    #[serde(skip_serializing)]
    pub token: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: String::new(),
            timeout_ms: 60_000,
            max_attempts: 3,
            backoff_ms: 250,
            token: None,
        }
    }
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            ..RemoteConfig::default()
        }
    }

    /// Picks up the bearer token from the environment when none is set.
    pub fn with_env_token(mut self) -> Self {
        if self.token.is_none() {
            self.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        }
        self
    }
}

/// One remote role. The same client type serves all five contracts; the
/// role only picks the endpoint used in error messages and URLs.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    role: Role,
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteClient {
    pub fn new(role: Role, config: RemoteConfig) -> Result<Self> {
        if config.base_url.is_empty() {
            return Err(Error::Config(format!("{role}: empty remote URL")));
        }
        if config.max_attempts == 0 {
            return Err(Error::Config(format!("{role}: max_attempts must be >= 1")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteClient { role, config, agent })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    fn url(&self) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), self.role.endpoint())
    }

    fn call<T: WireRequest>(&self, env: &Envelope<T>) -> Result<Vec<u8>> {
        debug_assert_eq!(T::ROLE, self.role);
        let body = wire::encode_request(env);
        let url = self.url();
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(token) = &self.config.token {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            match req.send(&body[..]) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_vec();
                    match (status, text) {
                        (200..=299, Ok(bytes)) => return Ok(bytes),
                        (200..=299, Err(e)) => last = format!("reading body: {e}"),
                        (429 | 500..=599, _) => last = format!("HTTP {status}"),
                        (_, body) => {
                            let detail = body.map(|b| String::from_utf8_lossy(&b).into_owned()).unwrap_or_default();
                            return Err(Error::Backend {
                                role: self.role,
                                attempts: attempt,
                                retryable: false,
                                message: format!("HTTP {status} from {url}: {detail}"),
                            });
                        }
                    }
                }
                Err(e) => last = format!("{url}: {e}"),
            }
            log::warn!("{} attempt {attempt}/{} failed: {last}", self.role, self.config.max_attempts);
        }
        Err(Error::Backend {
            role: self.role,
            attempts: self.config.max_attempts,
            retryable: true,
            message: last,
        })
    }
}

impl Generator for RemoteClient {
    fn generate(&self, req: &GenerateRequest) -> Result<SceneGraph> {
        wire::decode_scene_response(&self.call(&Envelope::new(req.clone()))?)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }
}

impl Corrector for RemoteClient {
    fn correct(&self, req: &CorrectRequest) -> Result<SceneGraph> {
        wire::decode_scene_response(&self.call(&Envelope::new(req.clone()))?)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }
}

impl Reflector for RemoteClient {
    fn reflect(&self, req: &ReflectRequest) -> Result<Reflection> {
        let env = Envelope::new(req.clone()).with_instruction(templates::REFLECTION);
        wire::decode_reflect_response(&self.call(&env)?)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }
}

impl Verifier for RemoteClient {
    fn verify(&self, req: &VerifyRequest) -> Result<VerifierReport> {
        let category = req.structured.category;
        let env = Envelope::new(req.clone()).with_instruction(templates::verifier_template(category));
        wire::decode_verify_response(&self.call(&env)?, category)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }
}

impl PromptRefiner for RemoteClient {
    fn refine_prompt(&self, req: &RefineRequest) -> Result<RefinedPrompt> {
        let env = Envelope::new(req.clone()).with_instruction(templates::REFINE_PROMPT);
        let text = wire::decode_refine_response(&self.call(&env)?)?;
        Ok(RefinedPrompt {
            text,
            specificity: None,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }
}
