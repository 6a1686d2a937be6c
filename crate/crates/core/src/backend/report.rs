//! Verifier reports and their per-category aspect schemas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::prompt::Category;

pub const OVERALL: &str = "overall_score";
pub const MAX_SCORE: f64 = 10.0;

/// Aspect keys (besides `overall_score`) a verifier must return per category.
pub fn aspect_keys(category: Category) -> [&'static str; 3] {
    match category {
        Category::SingleObject => ["object_completeness", "detectability", "occlusion_handling"],
        Category::TwoObjects => ["separation_clarity", "individual_completeness", "relationship_accuracy"],
        Category::Counting => ["count_accuracy", "object_uniformity", "spatial_legibility"],
        Category::Colors => ["color_fidelity", "contrast_effectiveness", "multi_object_consistency"],
        Category::Position => ["position_accuracy", "occlusion_management", "perspective_consistency"],
        Category::ColorAttribution => ["attribute_binding", "contrast_effectiveness", "material_consistency"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub aspect_scores: BTreeMap<String, f64>,
    pub overall_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl VerifierReport {
    /// Checks keys against the category schema and ranges against [0, 10].
    pub fn validate(&self, category: Category) -> Result<()> {
        for key in aspect_keys(category) {
            let v = self
                .aspect_scores
                .get(key)
                .ok_or_else(|| Error::schema(key, "missing aspect score"))?;
            check_range(key, *v)?;
        }
        check_range(OVERALL, self.overall_score)
    }

    /// Flat JSON object: aspect keys, then `overall_score`, then `rationale`.
    pub fn to_flat_json(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in &self.aspect_scores {
            map.insert(k.clone(), Value::from(*v));
        }
        map.insert(OVERALL.into(), Value::from(self.overall_score));
        if let Some(r) = &self.rationale {
            map.insert("rationale".into(), Value::from(r.clone()));
        }
        Value::Object(map)
    }

    /// Strict parse of a flat verifier payload. Unknown keys are ignored;
    /// missing or out-of-range scores are schema errors carrying the payload.
    pub fn parse_flat(raw: &str, category: Category) -> Result<Self> {
        let value: Value = serde_json::from_str(raw.trim()).map_err(|e| Error::from(e).with_raw(raw))?;
        Self::from_flat_value(&value, category).map_err(|e| e.with_raw(raw))
    }

    pub fn from_flat_value(value: &Value, category: Category) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::schema("", "verifier payload must be a JSON object"))?;
        let score = |key: &str| -> Result<f64> {
            let v = obj.get(key).ok_or_else(|| Error::schema(key, "required key missing"))?;
            let x = v
                .as_f64()
                .ok_or_else(|| Error::schema(key, format!("expected a number, got {v}")))?;
            check_range(key, x)?;
            Ok(x)
        };
        let mut aspect_scores = BTreeMap::new();
        for key in aspect_keys(category) {
            aspect_scores.insert(key.to_string(), score(key)?);
        }
        let overall_score = score(OVERALL)?;
        let rationale = match obj.get("rationale") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => return Err(Error::schema("rationale", format!("expected a string, got {other}"))),
        };
        Ok(VerifierReport {
            aspect_scores,
            overall_score,
            rationale,
        })
    }
}

fn check_range(key: &str, v: f64) -> Result<()> {
    if (0.0..=MAX_SCORE).contains(&v) {
        Ok(())
    } else {
        Err(Error::schema(key, format!("score {v} outside [0, 10]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_object_payload() {
        let raw = r#"{"object_completeness":8,"detectability":9,"occlusion_handling":10,"overall_score":9}"#;
        let r = VerifierReport::parse_flat(raw, Category::SingleObject).unwrap();
        assert_eq!(r.overall_score, 9.0);
        assert_eq!(r.aspect_scores.len(), 3);
        assert_eq!(r.aspect_scores["occlusion_handling"], 10.0);
    }

    #[test]
    fn missing_overall_names_the_path() {
        let raw = r#"{"object_completeness":8,"detectability":9,"occlusion_handling":10}"#;
        let err = VerifierReport::parse_flat(raw, Category::SingleObject).unwrap_err();
        assert_eq!(err.schema_path(), Some("overall_score"));
        match err {
            Error::Schema { raw: Some(payload), .. } => assert_eq!(payload, raw),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_and_wrong_type() {
        let raw = r#"{"count_accuracy":11,"object_uniformity":9,"spatial_legibility":1,"overall_score":5}"#;
        let err = VerifierReport::parse_flat(raw, Category::Counting).unwrap_err();
        assert_eq!(err.schema_path(), Some("count_accuracy"));
        let raw = r#"{"count_accuracy":"high","object_uniformity":9,"spatial_legibility":1,"overall_score":5}"#;
        assert!(VerifierReport::parse_flat(raw, Category::Counting).is_err());
    }

    #[test]
    fn unknown_keys_ignored() {
        let raw = r#"{"color_fidelity":1,"contrast_effectiveness":2,"multi_object_consistency":3,"overall_score":2,"mood":"great"}"#;
        assert!(VerifierReport::parse_flat(raw, Category::Colors).is_ok());
    }
}
