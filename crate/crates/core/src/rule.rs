//! Exact rule-based verification of scenes against structured prompts.
//!
//! Every required fact carries one unit of rubric mass: presence of each
//! object, each exact color, each count above one, each relation, and, for
//! single-object and counting prompts, the absence of unrequested objects.
//! A missing object also makes the facts that depend on it unverifiable;
//! that mass is charged to the `missing_object` error.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{RelationKind, StructuredPrompt};
use crate::scene::{SceneGraph, SceneObject};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    MissingObject,
    ExtraObject,
    WrongColor,
    WrongCount,
    WrongPosition,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::MissingObject => "missing_object",
            ErrorKind::ExtraObject => "extra_object",
            ErrorKind::WrongColor => "wrong_color",
            ErrorKind::WrongCount => "wrong_count",
            ErrorKind::WrongPosition => "wrong_position",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One concrete discrepancy between a scene and its prompt.
///
/// `expected`/`observed` encodings by kind:
/// - `missing_object`: `count=N[ color=C][ <relation>=<class>]` / `0`
/// - `extra_object`: `0` / observed instance count
/// - `wrong_color`: required color / first offending color
/// - `wrong_count`: required count / observed count
/// - `wrong_position`: `<relation> <class>` / `<actual> <class>`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ErrorFact {
    pub kind: ErrorKind,
    pub subject: String,
    pub expected: String,
    pub observed: String,
}

impl ErrorFact {
    pub fn new(kind: ErrorKind, subject: impl Into<String>, expected: impl Into<String>, observed: impl Into<String>) -> Self {
        ErrorFact {
            kind,
            subject: subject.into(),
            expected: expected.into(),
            observed: observed.into(),
        }
    }
}

/// Satisfied / total rubric units for one fact kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub satisfied: u32,
    pub total: u32,
}

impl Tally {
    /// Satisfied fraction; 1.0 when the kind is not part of the rubric.
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            f64::from(self.satisfied) / f64::from(self.total)
        }
    }

    fn record(&mut self, ok: bool) {
        self.total += 1;
        if ok {
            self.satisfied += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub presence: Tally,
    pub color: Tally,
    pub count: Tally,
    pub relation: Tally,
    pub exclusivity: Tally,
}

impl Breakdown {
    pub fn total(&self) -> u32 {
        self.presence.total + self.color.total + self.count.total + self.relation.total + self.exclusivity.total
    }

    pub fn satisfied(&self) -> u32 {
        self.presence.satisfied
            + self.color.satisfied
            + self.count.satisfied
            + self.relation.satisfied
            + self.exclusivity.satisfied
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleVerdict {
    pub score: f64,
    pub pass: bool,
    pub errors: Vec<ErrorFact>,
    pub breakdown: Breakdown,
}

fn relation_holds(kind: RelationKind, a: &SceneObject, b: &SceneObject) -> bool {
    let (ax, ay) = a.bbox.center();
    let (bx, by) = b.bbox.center();
    match kind {
        RelationKind::LeftOf => ax < bx,
        RelationKind::RightOf => ax > bx,
        // y grows downwards
        RelationKind::Above => ay < by,
        RelationKind::Below => ay > by,
    }
}

/// What the subject actually is, relative to the target, along the axis of `kind`.
pub(crate) fn observed_relation(kind: RelationKind, a: &SceneObject, b: &SceneObject) -> &'static str {
    let (ax, ay) = a.bbox.center();
    let (bx, by) = b.bbox.center();
    let (lo, hi, lo_name, hi_name) = if kind.is_horizontal() {
        (ax, bx, "left_of", "right_of")
    } else {
        (ay, by, "above", "below")
    };
    if lo < hi {
        lo_name
    } else if lo > hi {
        hi_name
    } else {
        "level_with"
    }
}

/// `count=N[ color=C][ rel=class]` for a missing object, enough to add it back.
fn missing_expectation(prompt: &StructuredPrompt, index: usize) -> String {
    let spec = &prompt.objects[index];
    let mut parts = vec![format!("count={}", spec.count)];
    if let Some(color) = spec.required_color() {
        parts.push(format!("color={color}"));
    }
    if let Some((subject, target, kind)) = prompt.relation() {
        if subject == index {
            parts.push(format!("{}={}", kind.as_str(), prompt.objects[target].class));
        } else if target == index {
            parts.push(format!("{}={}", kind.inverse().as_str(), prompt.objects[subject].class));
        }
    }
    parts.join(" ")
}

/// Score a scene against a prompt. Pure and deterministic; object order in the
/// scene does not matter.
pub fn verify_rule(prompt: &StructuredPrompt, scene: &SceneGraph, vocab: &Vocabulary) -> Result<RuleVerdict> {
    prompt.validate(vocab)?;
    let scene = scene.clone().canonical();

    let present: Vec<bool> = prompt
        .objects
        .iter()
        .map(|spec| scene.count_of(&spec.class) > 0)
        .collect();

    let mut breakdown = Breakdown::default();
    let mut errors = Vec::new();

    for (i, spec) in prompt.objects.iter().enumerate() {
        breakdown.presence.record(present[i]);
        if !present[i] {
            errors.push(ErrorFact::new(
                ErrorKind::MissingObject,
                &spec.class,
                missing_expectation(prompt, i),
                "0",
            ));
        }

        if let Some(color) = spec.required_color() {
            let offending = scene.instances(&spec.class).find(|o| o.color != color);
            let ok = present[i] && offending.is_none();
            breakdown.color.record(ok);
            if let (true, Some(o)) = (present[i], offending) {
                errors.push(ErrorFact::new(ErrorKind::WrongColor, &spec.class, color, &o.color));
            }
        }

        if spec.count > 1 {
            let observed = scene.count_of(&spec.class);
            breakdown.count.record(present[i] && observed == spec.count as usize);
            if present[i] && observed != spec.count as usize {
                errors.push(ErrorFact::new(
                    ErrorKind::WrongCount,
                    &spec.class,
                    spec.count.to_string(),
                    observed.to_string(),
                ));
            }
        }

        if let Some(rel) = spec.relation {
            let target = &prompt.objects[rel.other_index];
            let a = scene.instances(&spec.class).next();
            let b = scene.instances(&target.class).next();
            match (a, b) {
                (Some(a), Some(b)) => {
                    let ok = relation_holds(rel.relation, a, b);
                    breakdown.relation.record(ok);
                    if !ok {
                        errors.push(ErrorFact::new(
                            ErrorKind::WrongPosition,
                            &spec.class,
                            format!("{} {}", rel.relation.as_str(), target.class),
                            format!("{} {}", observed_relation(rel.relation, a, b), target.class),
                        ));
                    }
                }
                // unverifiable, charged to the missing object
                _ => breakdown.relation.record(false),
            }
        }
    }

    if prompt.category.constrains_extras() {
        let mut extras: BTreeMap<&str, usize> = BTreeMap::new();
        for obj in &scene.objects {
            if prompt.spec_for(&obj.class).is_none() {
                *extras.entry(obj.class.as_str()).or_default() += 1;
            }
        }
        breakdown.exclusivity.record(extras.is_empty());
        for (class, n) in extras {
            errors.push(ErrorFact::new(ErrorKind::ExtraObject, class, "0", n.to_string()));
        }
    }

    let total = breakdown.total();
    let satisfied = breakdown.satisfied();
    let score = f64::from(satisfied) / f64::from(total);
    let pass = satisfied == total;
    debug_assert_eq!(pass, errors.is_empty());
    Ok(RuleVerdict {
        score,
        pass,
        errors,
        breakdown,
    })
}

/// Fraction of passing verdicts.
pub fn prompt_difficulty(verdicts: &[RuleVerdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::invalid("difficulty of an empty rollout"));
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    Ok(passed as f64 / verdicts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyBin {
    Hard,
    Medium,
    Easy,
}

impl DifficultyBin {
    pub const ALL: [DifficultyBin; 3] = [DifficultyBin::Hard, DifficultyBin::Medium, DifficultyBin::Easy];

    /// Closed interval of pass fractions covered by this bin.
    pub fn range(self) -> (f64, f64) {
        match self {
            DifficultyBin::Hard => (0.0, 0.3),
            DifficultyBin::Medium => (0.4, 0.7),
            DifficultyBin::Easy => (0.8, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyBin::Hard => "hard",
            DifficultyBin::Medium => "medium",
            DifficultyBin::Easy => "easy",
        }
    }

    /// Bin for a pass fraction, plus whether it fell between bins and was
    /// assigned to the nearest one. Gap midpoints go to the harder bin.
    pub fn classify(difficulty: f64) -> (DifficultyBin, bool) {
        // tolerate float noise from k/n
        const EPS: f64 = 1e-9;
        for bin in Self::ALL {
            let (lo, hi) = bin.range();
            if difficulty >= lo - EPS && difficulty <= hi + EPS {
                return (bin, false);
            }
        }
        let distance = |bin: DifficultyBin| {
            let (lo, hi) = bin.range();
            if difficulty < lo {
                lo - difficulty
            } else {
                difficulty - hi
            }
        };
        let nearest = Self::ALL
            .into_iter()
            .min_by(|a, b| distance(*a).total_cmp(&distance(*b)))
            .expect("three bins");
        (nearest, true)
    }
}
