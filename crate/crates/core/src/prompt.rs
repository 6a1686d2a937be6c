//! Machine-checkable prompts and their text renderings.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::vocab::{Vocabulary, VARIED};

/// Specificity at or above which colors are mentioned in short renderings.
pub const COLOR_THRESHOLD: f64 = 0.5;
/// Specificity at or above which the spatial relation is mentioned.
pub const RELATION_THRESHOLD: f64 = 0.75;

pub const MIN_COUNT: u32 = 2;
pub const MAX_COUNT: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleObject,
    TwoObjects,
    Counting,
    Colors,
    Position,
    ColorAttribution,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::SingleObject,
        Category::TwoObjects,
        Category::Counting,
        Category::Colors,
        Category::Position,
        Category::ColorAttribution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::SingleObject => "single_object",
            Category::TwoObjects => "two_objects",
            Category::Counting => "counting",
            Category::Colors => "colors",
            Category::Position => "position",
            Category::ColorAttribution => "color_attribution",
        }
    }

    /// Whether objects outside the prompt count against the scene.
    pub fn constrains_extras(self) -> bool {
        matches!(self, Category::SingleObject | Category::Counting)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::LeftOf,
        RelationKind::RightOf,
        RelationKind::Above,
        RelationKind::Below,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "left_of",
            RelationKind::RightOf => "right_of",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "to the left of",
            RelationKind::RightOf => "to the right of",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            RelationKind::LeftOf => RelationKind::RightOf,
            RelationKind::RightOf => RelationKind::LeftOf,
            RelationKind::Above => RelationKind::Below,
            RelationKind::Below => RelationKind::Above,
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, RelationKind::LeftOf | RelationKind::RightOf)
    }
}

impl std::str::FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationKind::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown relation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub other_index: usize,
    pub relation: RelationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    pub count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
}

impl ObjectSpec {
    pub fn new(class: impl Into<String>) -> Self {
        ObjectSpec {
            class: class.into(),
            color: None,
            count: 1,
            relation: None,
        }
    }

    pub fn color(mut self, color: impl Into<String>) -> Self {
        self.color = Some(color.into());
        self
    }

    pub fn count(mut self, count: u32) -> Self {
        self.count = count;
        self
    }

    pub fn related(mut self, relation: RelationKind, other_index: usize) -> Self {
        self.relation = Some(Relation {
            other_index,
            relation,
        });
        self
    }

    /// The exact color this spec requires, if any (`varied` requires none).
    pub fn required_color(&self) -> Option<&str> {
        self.color.as_deref().filter(|c| *c != VARIED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub id: String,
    pub category: Category,
    pub objects: Vec<ObjectSpec>,
    pub specificity: f64,
}

impl StructuredPrompt {
    pub fn new(id: impl Into<String>, category: Category, objects: Vec<ObjectSpec>) -> Self {
        StructuredPrompt {
            id: id.into(),
            category,
            objects,
            specificity: 1.0,
        }
    }

    pub fn with_specificity(mut self, specificity: f64) -> Self {
        self.specificity = specificity;
        self
    }

    /// The (subject, target, kind) triple of the prompt's relation, if any.
    pub fn relation(&self) -> Option<(usize, usize, RelationKind)> {
        self.objects.iter().enumerate().find_map(|(i, spec)| {
            spec.relation
                .map(|r| (i, r.other_index, r.relation))
        })
    }

    pub fn spec_for(&self, class: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|s| s.class == class)
    }

    /// Category-shape, vocabulary and range checks.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(format!("prompt {}: {msg}", self.id)));
        if !(0.0..=1.0).contains(&self.specificity) || self.specificity.is_nan() {
            return fail(format!("specificity {} outside [0,1]", self.specificity));
        }
        for (i, spec) in self.objects.iter().enumerate() {
            if !vocab.has_class(&spec.class) {
                return fail(format!("class {:?} not in vocabulary", spec.class));
            }
            if let Some(color) = &spec.color {
                if color != VARIED && !vocab.has_color(color) {
                    return fail(format!("color {color:?} not in vocabulary"));
                }
            }
            if spec.count == 0 {
                return fail("object count must be positive".into());
            }
            if let Some(rel) = spec.relation {
                if rel.other_index == i || rel.other_index >= self.objects.len() {
                    return fail(format!("relation target {} is invalid", rel.other_index));
                }
            }
            if self.objects[..i].iter().any(|s| s.class == spec.class) {
                return fail(format!("class {:?} appears twice", spec.class));
            }
        }
        let n = self.objects.len();
        let relations = self.objects.iter().filter(|s| s.relation.is_some()).count();
        let all_colored = self.objects.iter().all(|s| s.color.is_some());
        let ok = match self.category {
            Category::SingleObject => n == 1 && self.objects[0].count == 1,
            Category::TwoObjects => n == 2,
            Category::Counting => {
                n == 1 && (MIN_COUNT..=MAX_COUNT).contains(&self.objects[0].count)
            }
            Category::Position => relations == 1,
            Category::Colors | Category::ColorAttribution => n >= 1 && all_colored,
        };
        if !ok {
            return fail(format!("objects do not fit category {}", self.category));
        }
        if self.category != Category::Position && relations > 0 {
            return fail("only position prompts carry relations".into());
        }
        Ok(())
    }
}

fn number_word(n: u32) -> String {
    match n {
        1 => "one".into(),
        2 => "two".into(),
        3 => "three".into(),
        4 => "four".into(),
        5 => "five".into(),
        6 => "six".into(),
        7 => "seven".into(),
        8 => "eight".into(),
        9 => "nine".into(),
        10 => "ten".into(),
        _ => n.to_string(),
    }
}

pub(crate) fn with_article(phrase: &str) -> String {
    let an = phrase
        .chars()
        .next()
        .is_some_and(|c| "aeiou".contains(c.to_ascii_lowercase()));
    format!("{} {phrase}", if an { "an" } else { "a" })
}

/// "red cube", "colored pencils", "four colored pencils", …
pub(crate) fn noun_phrase(
    class: &str,
    color: Option<&str>,
    count: u32,
    vocab: &Vocabulary,
) -> String {
    let mut words = Vec::new();
    if count != 1 {
        words.push(number_word(count));
    }
    match color {
        Some(VARIED) => words.push("colored".to_string()),
        Some(c) => words.push(c.to_string()),
        None => {}
    }
    words.push(if count == 1 {
        class.to_string()
    } else {
        vocab.plural(class)
    });
    let phrase = words.join(" ");
    if count == 1 {
        with_article(&phrase)
    } else {
        phrase
    }
}

/// Deterministic template rendering. `long` mentions every attribute; the short
/// form drops attributes whose threshold exceeds the prompt's specificity.
/// Classes and counts are never dropped.
pub fn render_prompt_text(prompt: &StructuredPrompt, long: bool, vocab: &Vocabulary) -> String {
    let keep = |threshold: f64| long || threshold <= prompt.specificity;
    let phrase = |spec: &ObjectSpec| {
        let color = spec.color.as_deref().filter(|_| keep(COLOR_THRESHOLD));
        noun_phrase(&spec.class, color, spec.count, vocab)
    };
    let body = match prompt.relation().filter(|_| keep(RELATION_THRESHOLD)) {
        Some((subject, target, kind)) => format!(
            "{} {} {}",
            phrase(&prompt.objects[subject]),
            kind.phrase(),
            phrase(&prompt.objects[target])
        ),
        None => prompt
            .objects
            .iter()
            .map(phrase)
            .collect::<Vec<_>>()
            .join(" and "),
    };
    format!("a photo of {body}")
}

/// Random prompt generation over a vocabulary.
#[derive(Debug, Clone)]
pub struct PromptSampler {
    pub vocab: Vocabulary,
    pub specificity_levels: Vec<f64>,
}

impl PromptSampler {
    pub fn new(vocab: Vocabulary) -> Self {
        PromptSampler {
            vocab,
            specificity_levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }

    pub fn sample(&self, id: impl Into<String>, category: Category, rng: &mut impl Rng) -> StructuredPrompt {
        let classes: Vec<&String> = self.vocab.classes.iter().collect();
        let pick_classes = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<String> {
            let mut chosen: Vec<String> = Vec::with_capacity(n);
            while chosen.len() < n.min(classes.len()) {
                let c = classes[rng.random_range(0..classes.len())];
                if !chosen.contains(c) {
                    chosen.push(c.clone());
                }
            }
            chosen
        };
        let color = |rng: &mut dyn rand::RngCore| -> String {
            self.vocab.colors[rng.random_range(0..self.vocab.colors.len())].clone()
        };
        let objects = match category {
            Category::SingleObject => vec![ObjectSpec::new(pick_classes(rng, 1).remove(0))],
            Category::TwoObjects => pick_classes(rng, 2).into_iter().map(ObjectSpec::new).collect(),
            Category::Counting => {
                let mut spec = ObjectSpec::new(pick_classes(rng, 1).remove(0))
                    .count(rng.random_range(MIN_COUNT..=MAX_COUNT));
                if rng.random_bool(0.5) {
                    spec = spec.color(VARIED);
                }
                vec![spec]
            }
            Category::Colors => {
                vec![ObjectSpec::new(pick_classes(rng, 1).remove(0)).color(color(rng))]
            }
            Category::Position => {
                let names = pick_classes(rng, 2);
                let kind = RelationKind::ALL[rng.random_range(0..4)];
                let colored = rng.random_bool(0.5);
                names
                    .into_iter()
                    .enumerate()
                    .map(|(i, name)| {
                        let mut spec = ObjectSpec::new(name);
                        if colored {
                            spec = spec.color(color(rng));
                        }
                        if i == 0 {
                            spec = spec.related(kind, 1);
                        }
                        spec
                    })
                    .collect()
            }
            Category::ColorAttribution => pick_classes(rng, 2)
                .into_iter()
                .map(|name| ObjectSpec::new(name).color(color(rng)))
                .collect(),
        };
        let specificity = *self
            .specificity_levels
            .choose(rng)
            .unwrap_or(&1.0);
        StructuredPrompt::new(id, category, objects).with_specificity(specificity)
    }

    /// `per_category` prompts for each of the six categories, ids `<prefix>-<n>`.
    pub fn balanced(&self, prefix: &str, per_category: usize, seed: u64) -> Vec<StructuredPrompt> {
        let mut out = Vec::with_capacity(per_category * Category::ALL.len());
        for category in Category::ALL {
            let mut rng = seed::sub_rng(seed, category.as_str());
            for _ in 0..per_category {
                let id = format!("{prefix}-{:04}", out.len());
                out.push(self.sample(id, category, &mut rng));
            }
        }
        out
    }
}
