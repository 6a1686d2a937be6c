use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the simulated backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorModel {
    /// Per-attribute corruption probability at full specificity.
    pub eps_attr: f64,
    /// Corruption scales by `1 + specificity_gain * (1 - specificity)`.
    pub specificity_gain: f64,
    /// Probability that a corrector fixes each error it is told about.
    pub p_fix: f64,
    /// Probability that a correction breaks one random attribute.
    pub p_regress: f64,
    /// Probability the reflector reports each true error.
    pub reflector_recall: f64,
    /// Probability the reflector adds one made-up error.
    pub reflector_hallucination: f64,
    /// Std-dev of verifier noise on the 0–10 scale.
    pub verifier_noise: f64,
}

impl Default for ErrorModel {
    /// Corrector advantage: fixing a named error is far likelier than a fresh
    /// sample getting every attribute right.
    fn default() -> Self {
        ErrorModel {
            eps_attr: 0.3,
            specificity_gain: 1.0,
            p_fix: 0.8,
            p_regress: 0.05,
            reflector_recall: 0.9,
            reflector_hallucination: 0.05,
            verifier_noise: 1.5,
        }
    }
}

impl ErrorModel {
    /// Perfect reflector, corrector and verifier around a given generator.
    pub fn oracle(eps_attr: f64) -> Self {
        ErrorModel {
            eps_attr,
            specificity_gain: 0.0,
            p_fix: 1.0,
            p_regress: 0.0,
            reflector_recall: 1.0,
            reflector_hallucination: 0.0,
            verifier_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("eps_attr", self.eps_attr),
            ("p_fix", self.p_fix),
            ("p_regress", self.p_regress),
            ("reflector_recall", self.reflector_recall),
            ("reflector_hallucination", self.reflector_hallucination),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.specificity_gain >= 0.0) || !(self.verifier_noise >= 0.0) {
            return Err(Error::Config("specificity_gain and verifier_noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Corruption probability for a prompt of the given specificity.
    pub fn corruption(&self, specificity: f64) -> f64 {
        (self.eps_attr * (1.0 + self.specificity_gain * (1.0 - specificity))).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ErrorModel::default().validate().unwrap();
        ErrorModel::oracle(0.4).validate().unwrap();
    }

    #[test]
    fn rejects_bad_probability() {
        let m = ErrorModel {
            p_fix: 1.5,
            ..ErrorModel::default()
        };
        assert!(m.validate().is_err());
        let m = ErrorModel {
            verifier_noise: -1.0,
            ..ErrorModel::default()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn corruption_scales_with_specificity() {
        let m = ErrorModel {
            eps_attr: 0.2,
            specificity_gain: 1.5,
            ..ErrorModel::default()
        };
        assert!((m.corruption(1.0) - 0.2).abs() < 1e-12);
        assert!((m.corruption(0.0) - 0.5).abs() < 1e-12);
        let sat = ErrorModel {
            eps_attr: 0.9,
            specificity_gain: 1.0,
            ..ErrorModel::default()
        };
        assert_eq!(sat.corruption(0.0), 1.0);
    }
}
