//! Closed vocabulary of object classes and colors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VOCAB_TOML: &str = include_str!("../assets/vocab.toml");

/// Reserved color token: "several colors", rendered as "colored". It never
/// creates a color fact for the rule verifier.
pub const VARIED: &str = "varied";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    #[serde(default)]
    pub plurals: BTreeMap<String, String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_toml(DEFAULT_VOCAB_TOML).expect("bundled vocabulary parses")
    }
}

impl Vocabulary {
    pub fn from_toml(text: &str) -> Result<Self> {
        let vocab: Vocabulary =
            toml::from_str(text).map_err(|e| Error::Config(format!("vocabulary: {e}")))?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// First `n_classes` classes and `n_colors` colors of this vocabulary.
    pub fn truncated(&self, n_classes: usize, n_colors: usize) -> Self {
        Vocabulary {
            classes: self.classes.iter().take(n_classes).cloned().collect(),
            colors: self.colors.iter().take(n_colors).cloned().collect(),
            plurals: self.plurals.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.colors.len() < 2 {
            return Err(Error::Config(
                "vocabulary needs at least one class and two colors".into(),
            ));
        }
        for token in self.classes.iter().chain(&self.colors) {
            if token.is_empty() || token.contains(char::is_whitespace) || token == VARIED {
                return Err(Error::Config(format!("bad vocabulary token {token:?}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for token in self.classes.iter().chain(&self.colors) {
            if !seen.insert(token) {
                return Err(Error::Config(format!("duplicate vocabulary token {token:?}")));
            }
        }
        Ok(())
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.classes.iter().any(|c| c == class)
    }

    pub fn has_color(&self, color: &str) -> bool {
        self.colors.iter().any(|c| c == color)
    }

    pub fn plural(&self, class: &str) -> String {
        if let Some(p) = self.plurals.get(class) {
            return p.clone();
        }
        pluralize(class)
    }
}

pub fn pluralize(word: &str) -> String {
    if ["s", "x", "ch", "sh"].iter().any(|s| word.ends_with(s)) {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}
