//! The five backend contracts the refinement loop drives, plus simulated and
//! remote implementations.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::prompt::StructuredPrompt;
use crate::scene::SceneGraph;

pub mod error_model;
pub mod reflection;
pub mod remote;
pub mod report;
pub mod sim;
pub mod wire;

pub use error_model::ErrorModel;
pub use reflection::Reflection;
pub use report::VerifierReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Corrector,
    Reflector,
    Verifier,
    Refiner,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Generator,
        Role::Corrector,
        Role::Reflector,
        Role::Verifier,
        Role::Refiner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Corrector => "corrector",
            Role::Reflector => "reflector",
            Role::Verifier => "verifier",
            Role::Refiner => "refiner",
        }
    }

    /// HTTP path of this role's endpoint.
    pub fn endpoint(self) -> &'static str {
        match self {
            Role::Generator => "/generate",
            Role::Corrector => "/correct",
            Role::Reflector => "/reflect",
            Role::Verifier => "/verify",
            Role::Refiner => "/refine_prompt",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Simulated,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub structured: StructuredPrompt,
    pub seed: u64,
    /// Opaque sampler parameters forwarded to remote generators.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectRequest {
    pub original_prompt: String,
    pub refined_prompt: String,
    pub structured: StructuredPrompt,
    pub reflection: Reflection,
    pub flawed: SceneGraph,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectRequest {
    pub original_prompt: String,
    pub current_prompt: String,
    pub structured: StructuredPrompt,
    pub scene: SceneGraph,
    /// Full report of the scene being reflected on.
    pub report: VerifierReport,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub prompt: String,
    pub structured: StructuredPrompt,
    pub scene: SceneGraph,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub original: String,
    pub current: String,
    pub structured: StructuredPrompt,
    pub scenes: Vec<SceneGraph>,
    pub reports: Vec<VerifierReport>,
    pub reflection: Reflection,
}

/// A refined prompt. Simulated refiners also report the specificity the new
/// text was rendered at, so simulated generators can read it.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPrompt {
    pub text: String,
    pub specificity: Option<f64>,
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<SceneGraph>;
    fn kind(&self) -> BackendKind;
}

pub trait Corrector: Send + Sync {
    fn correct(&self, req: &CorrectRequest) -> Result<SceneGraph>;
    fn kind(&self) -> BackendKind;
}

pub trait Reflector: Send + Sync {
    fn reflect(&self, req: &ReflectRequest) -> Result<Reflection>;
    fn kind(&self) -> BackendKind;
}

pub trait Verifier: Send + Sync {
    fn verify(&self, req: &VerifyRequest) -> Result<VerifierReport>;
    fn kind(&self) -> BackendKind;
}

pub trait PromptRefiner: Send + Sync {
    fn refine_prompt(&self, req: &RefineRequest) -> Result<RefinedPrompt>;
    fn kind(&self) -> BackendKind;
}

/// One implementation per role. Simulated and remote backends may be mixed.
#[derive(Clone)]
pub struct BackendBundle {
    pub generator: Arc<dyn Generator>,
    pub corrector: Arc<dyn Corrector>,
    pub reflector: Arc<dyn Reflector>,
    pub verifier: Arc<dyn Verifier>,
    pub refiner: Arc<dyn PromptRefiner>,
    /// Verifier used for final selection; the in-loop verifier when `None`.
    pub final_verifier: Option<Arc<dyn Verifier>>,
}

impl BackendBundle {
    pub fn selection_verifier(&self) -> &Arc<dyn Verifier> {
        self.final_verifier.as_ref().unwrap_or(&self.verifier)
    }

    pub fn kinds(&self) -> BTreeMap<Role, BackendKind> {
        BTreeMap::from([
            (Role::Generator, self.generator.kind()),
            (Role::Corrector, self.corrector.kind()),
            (Role::Reflector, self.reflector.kind()),
            (Role::Verifier, self.verifier.kind()),
            (Role::Refiner, self.refiner.kind()),
        ])
    }

    pub fn with_verifier(mut self, verifier: Arc<dyn Verifier>) -> Self {
        self.verifier = verifier;
        self
    }

    pub fn with_final_verifier(mut self, verifier: Arc<dyn Verifier>) -> Self {
        self.final_verifier = Some(verifier);
        self
    }
}

impl fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendBundle").field("kinds", &self.kinds()).finish()
    }
}
