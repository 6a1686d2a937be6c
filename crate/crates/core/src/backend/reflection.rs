//! Textual reflections: rendering error facts as imperative instructions and
//! parsing instructions back into scene edits.
//!
//! Every sentence starts with one of five verbs: Add, Remove, Replace,
//! Reposition, Adjust.

use serde::{Deserialize, Serialize};

use crate::prompt::{noun_phrase, RelationKind};
use crate::rule::{ErrorFact, ErrorKind};
use crate::vocab::{Vocabulary, VARIED};

pub const NO_CHANGES: &str = "No changes required.";
pub const ADJUST_QUALITY: &str = "Adjust the lighting and fine detail to improve overall image quality.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reflection {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<Vec<ErrorFact>>,
}

impl Reflection {
    pub fn no_changes() -> Self {
        Reflection {
            text: NO_CHANGES.into(),
            structured: Some(Vec::new()),
        }
    }

    pub fn from_text(text: impl Into<String>) -> Self {
        Reflection {
            text: text.into(),
            structured: None,
        }
    }

    pub fn from_facts(facts: Vec<ErrorFact>, vocab: &Vocabulary) -> Self {
        if facts.is_empty() {
            return Self::no_changes();
        }
        let text = facts
            .iter()
            .map(|f| render_fact(f, vocab))
            .collect::<Vec<_>>()
            .join(" ");
        Reflection {
            text,
            structured: Some(facts),
        }
    }

    pub fn is_empty_instruction(&self) -> bool {
        self.text.trim() == NO_CHANGES
    }
}

/// A concrete change a corrector can apply to a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Edit {
    Add {
        class: String,
        color: Option<String>,
        count: u32,
        relation: Option<(RelationKind, String)>,
    },
    Remove {
        class: String,
    },
    Recolor {
        class: String,
        to: String,
    },
    SetCount {
        class: String,
        count: u32,
    },
    ChangeCount {
        class: String,
        delta: i64,
    },
    Reposition {
        class: String,
        relation: RelationKind,
        target: String,
    },
    Polish,
}

fn number_word(n: u64) -> String {
    match n {
        1 => "one".into(),
        2 => "two".into(),
        3 => "three".into(),
        4 => "four".into(),
        5 => "five".into(),
        6 => "six".into(),
        _ => n.to_string(),
    }
}

fn parse_number(word: &str) -> Option<u64> {
    match word {
        "a" | "an" | "one" => Some(1),
        "two" => Some(2),
        "three" => Some(3),
        "four" => Some(4),
        "five" => Some(5),
        "six" => Some(6),
        "seven" => Some(7),
        "eight" => Some(8),
        "nine" => Some(9),
        "ten" => Some(10),
        w => w.parse().ok(),
    }
}

/// Key/value fields of a `missing_object` expectation.
struct Missing {
    count: u32,
    color: Option<String>,
    relation: Option<(RelationKind, String)>,
}

fn parse_missing(expected: &str) -> Missing {
    let mut m = Missing {
        count: 1,
        color: None,
        relation: None,
    };
    for part in expected.split_whitespace() {
        let Some((k, v)) = part.split_once('=') else { continue };
        match k {
            "count" => m.count = v.parse().unwrap_or(1),
            "color" => m.color = Some(v.to_string()),
            rel => {
                if let Ok(kind) = rel.parse::<RelationKind>() {
                    m.relation = Some((kind, v.to_string()));
                }
            }
        }
    }
    m
}

pub fn render_fact(fact: &ErrorFact, vocab: &Vocabulary) -> String {
    let class = &fact.subject;
    match fact.kind {
        ErrorKind::MissingObject => {
            let m = parse_missing(&fact.expected);
            let mut s = format!("Add {}", noun_phrase(class, m.color.as_deref(), m.count, vocab));
            if let Some((kind, target)) = m.relation {
                s.push_str(&format!(" {} the {target}", kind.phrase()));
            }
            s + "."
        }
        ErrorKind::ExtraObject => match fact.observed.parse::<u64>() {
            Ok(n) if n > 1 => format!("Remove all {} {}.", number_word(n), vocab.plural(class)),
            _ => format!("Remove the {class}."),
        },
        ErrorKind::WrongColor => {
            format!("Replace the {} {class}'s color with {}.", fact.observed, fact.expected)
        }
        ErrorKind::WrongCount => {
            let expected: i64 = fact.expected.parse().unwrap_or(0);
            let observed: i64 = fact.observed.parse().unwrap_or(0);
            let diff = observed - expected;
            let noun = |n: u64| if n == 1 { class.clone() } else { vocab.plural(class) };
            if diff > 0 {
                let n = diff as u64;
                format!("Remove {} {} from the group.", number_word(n), noun(n))
            } else {
                let n = (-diff) as u64;
                format!("Add {} more {} to the group.", number_word(n), noun(n))
            }
        }
        ErrorKind::WrongPosition => {
            let (rel, target) = fact.expected.split_once(' ').unwrap_or((&fact.expected, ""));
            let phrase = rel.parse::<RelationKind>().map(|k| k.phrase()).unwrap_or(rel);
            format!("Reposition the {class} {phrase} the {target}.")
        }
    }
}

pub fn fact_to_edit(fact: &ErrorFact) -> Edit {
    let class = fact.subject.clone();
    match fact.kind {
        ErrorKind::MissingObject => {
            let m = parse_missing(&fact.expected);
            Edit::Add {
                class,
                color: m.color,
                count: m.count,
                relation: m.relation,
            }
        }
        ErrorKind::ExtraObject => Edit::Remove { class },
        ErrorKind::WrongColor => Edit::Recolor {
            class,
            to: fact.expected.clone(),
        },
        ErrorKind::WrongCount => match fact.expected.parse() {
            Ok(count) => Edit::SetCount { class, count },
            Err(_) => Edit::Polish,
        },
        ErrorKind::WrongPosition => {
            let (rel, target) = fact.expected.split_once(' ').unwrap_or((&fact.expected, ""));
            match rel.parse() {
                Ok(relation) => Edit::Reposition {
                    class,
                    relation,
                    target: target.to_string(),
                },
                Err(_) => Edit::Polish,
            }
        }
    }
}

/// Parse result of a free-text reflection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedReflection {
    pub edits: Vec<Edit>,
    pub unparsed: Vec<String>,
}

fn sentences(text: &str) -> Vec<String> {
    text.split(['.', '\n'])
        .map(|s| s.trim().trim_start_matches('-').trim())
        .filter(|s| !s.is_empty())
        // section header of the reflection template output
        .filter(|s| !s.eq_ignore_ascii_case("1") && !s.eq_ignore_ascii_case("Prompt Following:"))
        .map(str::to_string)
        .collect()
}

struct Noun {
    count: u64,
    color: Option<String>,
    class: String,
}

fn singular<'a>(word: &str, vocab: &'a Vocabulary) -> Option<&'a str> {
    vocab
        .classes
        .iter()
        .find(|c| c.as_str() == word || vocab.plural(c) == word)
        .map(String::as_str)
}

/// `[article|number] [color|colored] class-or-plural`
fn parse_noun(phrase: &str, vocab: &Vocabulary) -> Option<Noun> {
    let mut words: Vec<&str> = phrase.split_whitespace().collect();
    if words.first() == Some(&"the") {
        words.remove(0);
    }
    let mut count = 1;
    if let Some(n) = words.first().and_then(|w| parse_number(w)) {
        count = n;
        words.remove(0);
    }
    let mut color = None;
    if words.len() == 2 {
        let c = words.remove(0);
        if c == "colored" {
            color = Some(VARIED.to_string());
        } else if vocab.has_color(c) {
            color = Some(c.to_string());
        } else {
            return None;
        }
    }
    match words.as_slice() {
        [w] => singular(w, vocab).map(|class| Noun {
            count,
            color,
            class: class.to_string(),
        }),
        _ => None,
    }
}

/// Split `"<head> <relation phrase> the <target>"`.
fn split_relation(text: &str) -> Option<(&str, RelationKind, &str)> {
    RelationKind::ALL.iter().find_map(|kind| {
        let needle = format!(" {} the ", kind.phrase());
        text.find(&needle)
            .map(|at| (&text[..at], *kind, &text[at + needle.len()..]))
    })
}

fn parse_sentence(s: &str, vocab: &Vocabulary) -> Option<Edit> {
    if let Some(rest) = s.strip_prefix("Replace the ") {
        let (head, to) = rest.split_once("'s color with ")?;
        let class = head.split_whitespace().last()?;
        let class = singular(class, vocab)?.to_string();
        let to = to.trim();
        return vocab.has_color(to).then(|| Edit::Recolor {
            class,
            to: to.to_string(),
        });
    }
    if let Some(rest) = s.strip_prefix("Reposition the ") {
        let (head, relation, target) = split_relation(rest)?;
        let class = singular(head.trim(), vocab)?.to_string();
        let target = singular(target.trim(), vocab)?.to_string();
        return Some(Edit::Reposition {
            class,
            relation,
            target,
        });
    }
    if let Some(rest) = s.strip_prefix("Remove ") {
        if let Some(head) = rest.strip_suffix(" from the group") {
            let noun = parse_noun(head, vocab)?;
            return Some(Edit::ChangeCount {
                class: noun.class,
                delta: -(noun.count as i64),
            });
        }
        let head = rest.strip_prefix("all ").unwrap_or(rest);
        let noun = parse_noun(head, vocab)?;
        return Some(Edit::Remove { class: noun.class });
    }
    if let Some(rest) = s.strip_prefix("Add ") {
        if let Some(head) = rest.strip_suffix(" to the group") {
            let head = head.replacen(" more ", " ", 1);
            let noun = parse_noun(&head, vocab)?;
            return Some(Edit::ChangeCount {
                class: noun.class,
                delta: noun.count as i64,
            });
        }
        let (head, relation) = match split_relation(rest) {
            Some((head, kind, target)) => (head, Some((kind, singular(target.trim(), vocab)?.to_string()))),
            None => (rest, None),
        };
        let noun = parse_noun(head, vocab)?;
        return Some(Edit::Add {
            class: noun.class,
            color: noun.color.filter(|c| c != VARIED),
            count: noun.count as u32,
            relation,
        });
    }
    if s.starts_with("Adjust ") {
        return Some(Edit::Polish);
    }
    None
}

/// Parse the restricted verb grammar. Sentences that do not parse are
/// returned in `unparsed`; "No changes required." yields no edits.
pub fn parse_reflection(text: &str, vocab: &Vocabulary) -> ParsedReflection {
    let mut out = ParsedReflection::default();
    if text.trim() == NO_CHANGES {
        return out;
    }
    for s in sentences(text) {
        match parse_sentence(&s, vocab) {
            Some(edit) => out.edits.push(edit),
            None => out.unparsed.push(s),
        }
    }
    out
}

/// Edits a corrector should apply: structured facts when present, else the
/// parsed text.
pub fn reflection_edits(reflection: &Reflection, vocab: &Vocabulary) -> ParsedReflection {
    match &reflection.structured {
        Some(facts) => ParsedReflection {
            edits: facts.iter().map(fact_to_edit).collect(),
            unparsed: Vec::new(),
        },
        None => parse_reflection(&reflection.text, vocab),
    }
}
