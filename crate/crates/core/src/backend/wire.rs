//! JSON wire format for remote backends.
//!
//! Requests are compact JSON objects with a required `"v"` field, an optional
//! `"instruction"` (the shipped template for multimodal roles) and the request
//! fields. Responses may omit `"v"`; unknown fields are ignored everywhere.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::report::VerifierReport;
use super::{CorrectRequest, GenerateRequest, Reflection, RefineRequest, ReflectRequest, Role, VerifyRequest};
use crate::error::{Error, Result};
use crate::prompt::Category;
use crate::scene::SceneGraph;

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(body: T) -> Self {
        Envelope {
            v: WIRE_VERSION,
            instruction: None,
            body,
        }
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = Some(instruction.into());
        self
    }
}

/// A request type and the endpoint it is posted to.
pub trait WireRequest: Serialize + DeserializeOwned {
    const ROLE: Role;
}

impl WireRequest for GenerateRequest {
    const ROLE: Role = Role::Generator;
}
impl WireRequest for CorrectRequest {
    const ROLE: Role = Role::Corrector;
}
impl WireRequest for ReflectRequest {
    const ROLE: Role = Role::Reflector;
}
impl WireRequest for VerifyRequest {
    const ROLE: Role = Role::Verifier;
}
impl WireRequest for RefineRequest {
    const ROLE: Role = Role::Refiner;
}

pub fn encode_request<T: WireRequest>(req: &Envelope<T>) -> Vec<u8> {
    serde_json::to_vec(req).expect("request types serialize infallibly")
}

pub fn decode_request<T: WireRequest>(bytes: &[u8]) -> Result<Envelope<T>> {
    let raw = || lossy(bytes);
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::from(e).with_raw(raw()))?;
    let serde_json::Value::Object(mut map) = value else {
        return Err(Error::schema("", "request must be a JSON object").with_raw(raw()));
    };
    let v = match map.remove("v") {
        None => return Err(Error::schema("v", "missing field `v`").with_raw(raw())),
        Some(v) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| Error::schema("v", format!("expected an integer, got {v}")).with_raw(raw()))?,
    };
    check_version(Some(v)).map_err(|e| e.with_raw(raw()))?;
    let instruction = match map.remove("instruction") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s),
        Some(other) => {
            return Err(Error::schema("instruction", format!("expected a string, got {other}")).with_raw(raw()))
        }
    };
    let body = serde_path_to_error::deserialize(serde_json::Value::Object(map))
        .map_err(|err| path_error(err.path().to_string(), err.inner().to_string()).with_raw(raw()))?;
    Ok(Envelope { v, instruction, body })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    pub scene: SceneGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    pub reflection: Reflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    pub prompt: String,
}

pub fn encode_response<T: Serialize>(resp: &T) -> Vec<u8> {
    serde_json::to_vec(resp).expect("response types serialize infallibly")
}

/// Response of `/generate` and `/correct`.
pub fn decode_scene_response(bytes: &[u8]) -> Result<SceneGraph> {
    let resp: SceneResponse = decode(bytes)?;
    check_version(resp.v).map_err(|e| e.with_raw(lossy(bytes)))?;
    resp.scene
        .validate()
        .map_err(|e| Error::schema("scene", e.to_string()).with_raw(lossy(bytes)))?;
    Ok(resp.scene.canonical())
}

pub fn decode_reflect_response(bytes: &[u8]) -> Result<Reflection> {
    let resp: ReflectResponse = decode(bytes)?;
    check_version(resp.v).map_err(|e| e.with_raw(lossy(bytes)))?;
    if resp.reflection.text.trim().is_empty() {
        return Err(Error::schema("reflection.text", "empty reflection").with_raw(lossy(bytes)));
    }
    Ok(resp.reflection)
}

/// The verifier answers with the flat aspect object its template asks for.
pub fn decode_verify_response(bytes: &[u8], category: Category) -> Result<VerifierReport> {
    let raw = lossy(bytes);
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::from(e).with_raw(raw.clone()))?;
    let v = value.get("v").map(|v| v.as_u64().map(|n| n as u32).unwrap_or(0));
    check_version(v).map_err(|e| e.with_raw(raw.clone()))?;
    VerifierReport::from_flat_value(&value, category).map_err(|e| e.with_raw(raw))
}

/// Model text verbatim, minus surrounding whitespace.
pub fn decode_refine_response(bytes: &[u8]) -> Result<String> {
    let resp: RefineResponse = decode(bytes)?;
    check_version(resp.v).map_err(|e| e.with_raw(lossy(bytes)))?;
    let text = resp.prompt.trim();
    if text.is_empty() {
        return Err(Error::schema("prompt", "empty refined prompt").with_raw(lossy(bytes)));
    }
    Ok(text.to_string())
}

fn check_version(v: Option<u32>) -> Result<()> {
    match v {
        None => Ok(()),
        Some(WIRE_VERSION) => Ok(()),
        Some(other) => Err(Error::schema("v", format!("unsupported wire version {other}"))),
    }
}

fn lossy(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Deserialize with the failing field path in the error.
fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de)
        .map_err(|err| path_error(err.path().to_string(), err.inner().to_string()).with_raw(lossy(bytes)))
}

fn path_error(mut path: String, message: String) -> Error {
    if let Some(field) = missing_field(&message) {
        path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
    }
    if path == "." {
        path.clear();
    }
    Error::schema(path, message)
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{ObjectSpec, StructuredPrompt};

    fn verify_req() -> VerifyRequest {
        VerifyRequest {
            prompt: "a photo of a red cube".into(),
            structured: StructuredPrompt::new("p", Category::Colors, vec![ObjectSpec::new("cube").color("red")]),
            scene: SceneGraph::empty(),
            seed: 42,
        }
    }

    #[test]
    fn request_round_trip() {
        let env = Envelope::new(verify_req()).with_instruction("score it");
        let bytes = encode_request(&env);
        assert!(bytes.starts_with(br#"{"v":1,"instruction":"score it","prompt":"#));
        let back: Envelope<VerifyRequest> = decode_request(&bytes).unwrap();
        assert_eq!(back, env);
        assert_eq!(encode_request(&back), bytes);
    }

    #[test]
    fn request_requires_version() {
        let mut value = serde_json::to_value(Envelope::new(verify_req())).unwrap();
        value.as_object_mut().unwrap().remove("v");
        let err = decode_request::<VerifyRequest>(value.to_string().as_bytes()).unwrap_err();
        assert_eq!(err.schema_path(), Some("v"));
    }

    #[test]
    fn nested_missing_field_path() {
        let raw = br#"{"v":1,"prompt":"x","structured":{"id":"p","objects":[],"specificity":1.0},"scene":{"objects":[],"quality":0.5},"seed":1}"#;
        let err = decode_request::<VerifyRequest>(raw).unwrap_err();
        assert_eq!(err.schema_path(), Some("structured.category"));
    }

    #[test]
    fn unknown_response_fields_ignored() {
        let raw = br#"{"v":1,"scene":{"objects":[],"quality":0.5},"latency_ms":12}"#;
        assert_eq!(decode_scene_response(raw).unwrap().quality, 0.5);
        let raw = br#"{"prompt":"  a photo of a red cube \n","model":"x"}"#;
        assert_eq!(decode_refine_response(raw).unwrap(), "a photo of a red cube");
    }

    #[test]
    fn empty_refine_is_schema_error() {
        let err = decode_refine_response(br#"{"v":1,"prompt":"   "}"#).unwrap_err();
        assert_eq!(err.schema_path(), Some("prompt"));
    }

    #[test]
    fn verify_response_missing_overall() {
        let raw = br#"{"v":1,"object_completeness":8,"detectability":9,"occlusion_handling":10}"#;
        let err = decode_verify_response(raw, Category::SingleObject).unwrap_err();
        assert_eq!(err.schema_path(), Some("overall_score"));
    }

    #[test]
    fn wrong_version_rejected() {
        let err = decode_scene_response(br#"{"v":2,"scene":{"objects":[],"quality":0.5}}"#).unwrap_err();
        assert_eq!(err.schema_path(), Some("v"));
    }
}
