//! Rewrite the instruction side of an instruction-tuning corpus with
//! sampled templates.
//!
//! Records use the LLaVA conversation layout:
//!
//! ```json
//! {"id": "0001", "image": "coco/train2017/0001.jpg",
//!  "conversations": [{"from": "human", "value": "<image>\nWhat is shown?"},
//!                    {"from": "gpt", "value": "A cat."}]}
//! ```
//!
//! Each targeted human turn is split into question, optional options block
//! and image token, the question and options are poured into the assigned
//! template, and the image token goes back at the head. The corpus keeps
//! its size and every gpt turn is left untouched.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::grammar::{fill_data_slots, CHOICES_SLOT, QUESTION_SLOT};
use crate::sampler::TemplateSet;

pub const IMAGE_TOKEN: &str = "<image>";

/// Corpora with more than this fraction of malformed records are refused.
pub const DEFAULT_REJECT_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Gpt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "from")]
    pub role: Role,
    pub value: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Turn {
    pub fn new(role: Role, value: impl Into<String>) -> Self {
        Turn {
            role,
            value: value.into(),
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: RecordId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub conversations: Vec<Turn>,
    /// Fields this crate does not interpret are carried through unchanged.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Record id, kept as the string or number it was written as.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordId {
    Text(String),
    Number(serde_json::Number),
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordId::Text(s) => f.write_str(s),
            RecordId::Number(n) => write!(f, "{n}"),
        }
    }
}

impl From<&str> for RecordId {
    fn from(s: &str) -> Self {
        RecordId::Text(s.to_owned())
    }
}

impl From<String> for RecordId {
    fn from(s: String) -> Self {
        RecordId::Text(s)
    }
}

impl InstructionRecord {
    /// Why the record breaks a corpus invariant, if it does.
    pub fn violation(&self) -> Option<&'static str> {
        if self.conversations.is_empty() {
            return Some("empty conversation");
        }
        let alternates = self.conversations.iter().enumerate().all(|(i, t)| {
            t.role
                == if i % 2 == 0 {
                    Role::Human
                } else {
                    Role::Gpt
                }
        });
        if !alternates {
            return Some("turn order");
        }
        if self.conversations[0].value.matches(IMAGE_TOKEN).count() > 1 {
            return Some("multiple image tokens");
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<InstructionRecord>,
    pub rejects: Vec<Reject>,
}

/// Parse a corpus from a JSON array. Malformed records are collected into
/// [`Corpus::rejects`]; more than `reject_limit` (a fraction) of them aborts.
pub fn parse_corpus(text: &str, reject_limit: f64) -> Result<Corpus> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::json("corpus", e))?;
    let Value::Array(items) = root else {
        return Err(Error::Format("corpus root must be a JSON array".into()));
    };
    let total = items.len();
    let mut corpus = Corpus::default();
    for (ordinal, item) in items.into_iter().enumerate() {
        let id = match item.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("#{ordinal}"),
        };
        match serde_json::from_value::<InstructionRecord>(item) {
            Ok(rec) => match rec.violation() {
                None => corpus.records.push(rec),
                Some(reason) => corpus.rejects.push(Reject {
                    id,
                    reason: reason.into(),
                }),
            },
            Err(e) => corpus.rejects.push(Reject {
                id,
                reason: format!("malformed: {e}"),
            }),
        }
    }
    if corpus.rejects.len() as f64 > reject_limit * total as f64 {
        return Err(Error::TooManyRejects {
            rejected: corpus.rejects.len(),
            total,
            limit_pct: reject_limit * 100.0,
        });
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, DEFAULT_REJECT_LIMIT)
}

/// Write records as a JSON array, one record per line.
pub fn write_corpus<W: Write>(records: &[InstructionRecord], mut w: W) -> Result<()> {
    let io = |e| Error::io("<corpus>", e);
    w.write_all(b"[").map_err(io)?;
    for (i, r) in records.iter().enumerate() {
        w.write_all(if i == 0 { b"\n" } else { b",\n" }).map_err(io)?;
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json("corpus record", e))?;
    }
    w.write_all(b"\n]\n").map_err(io)?;
    w.flush().map_err(io)
}

pub fn save_corpus(path: &Path, records: &[InstructionRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(records, BufWriter::new(f))
}

pub fn write_rejects<W: Write>(rejects: &[Reject], mut w: W) -> Result<()> {
    for r in rejects {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json("reject", e))?;
        w.write_all(b"\n").map_err(|e| Error::io("<rejects>", e))?;
    }
    w.flush().map_err(|e| Error::io("<rejects>", e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImagePosition {
    Head,
    Tail,
}

/// An instruction taken apart for templating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitInstruction {
    pub question: String,
    /// The options block, verbatim, one option per line.
    pub choices: Option<String>,
    pub image: Option<ImagePosition>,
}

/// Option identifier at the start of a line: `A.`, `(A)` or `A)` followed
/// by whitespace.
fn option_letter(line: &str) -> Option<char> {
    let line = line.trim_start();
    let b = line.as_bytes();
    let (letter, rest) = match b {
        [b'(', l, b')', ..] if l.is_ascii_uppercase() => (*l, &line[3..]),
        [l, b'.' | b')', ..] if l.is_ascii_uppercase() => (*l, &line[2..]),
        _ => return None,
    };
    rest.starts_with(char::is_whitespace)
        .then_some(letter as char)
}

/// Separate the image token, the question and a trailing options block.
///
/// The options block is the longest run of final lines whose identifiers
/// read A, B, C, ... in order; it needs at least two lines and some
/// question text before it. Anything else leaves the remainder whole.
pub fn split_instruction(value: &str) -> SplitInstruction {
    let mut text = value;
    let mut image = None;
    let trimmed = text.trim_start();
    if let Some(rest) = trimmed.strip_prefix(IMAGE_TOKEN) {
        text = rest.strip_prefix('\n').unwrap_or(rest);
        image = Some(ImagePosition::Head);
    } else if let Some(rest) = text.trim_end().strip_suffix(IMAGE_TOKEN) {
        text = rest.strip_suffix('\n').unwrap_or(rest);
        image = Some(ImagePosition::Tail);
    }

    let lines: Vec<&str> = text.lines().collect();
    let mut start = lines.len();
    while start > 0 && option_letter(lines[start - 1]).is_some() {
        start -= 1;
    }
    // Keep only the suffix whose letters run A, B, C, ... to the end.
    let block_start = (start..lines.len()).find(|&s| {
        lines[s..]
            .iter()
            .zip('A'..='Z')
            .all(|(l, expect)| option_letter(l) == Some(expect))
            && lines.len() - s <= 26
    });
    if let Some(s) = block_start {
        let question = lines[..s].join("\n");
        let question = question.trim();
        if lines.len() - s >= 2 && !question.is_empty() {
            return SplitInstruction {
                question: question.to_owned(),
                choices: Some(lines[s..].join("\n")),
                image,
            };
        }
    }
    SplitInstruction {
        question: text.trim().to_owned(),
        choices: None,
        image,
    }
}

/// Remove the `{choices}` slot together with its label, i.e. the text back
/// to the previous sentence terminator (or the end of `{question}`), and one
/// adjacent newline.
pub fn elide_choices(template: &str) -> String {
    let Some(slot) = template.find(CHOICES_SLOT) else {
        return template.to_owned();
    };
    let end = slot + CHOICES_SLOT.len();
    let head = &template[..slot];
    let mut start = head
        .rfind(['.', '?', '!', '\n'])
        .map(|i| i + 1)
        .unwrap_or(0);
    if let Some(q) = head.find(QUESTION_SLOT) {
        start = start.max(q + QUESTION_SLOT.len());
    }
    let (mut start, mut end) = (start, end);
    if template[..start].ends_with('\n') {
        start -= 1;
    } else if template[end..].starts_with('\n') {
        end += 1;
    }
    format!("{}{}", &template[..start], &template[end..])
}

/// Instantiate one template for one instruction.
pub fn apply_template(template: &str, split: &SplitInstruction) -> String {
    let body = match &split.choices {
        Some(choices) => fill_data_slots(template, &split.question, choices),
        None => fill_data_slots(&elide_choices(template), &split.question, ""),
    };
    match split.image {
        Some(_) => format!("{IMAGE_TOKEN}\n{body}"),
        None => body,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMode {
    PerRecordRandom,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnScope {
    FirstHuman,
    AllHuman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPolicy {
    pub mode: AssignMode,
    pub seed: Option<u64>,
    pub turns: TurnScope,
}

impl AugmentPolicy {
    pub fn random(seed: u64) -> Self {
        AugmentPolicy {
            mode: AssignMode::PerRecordRandom,
            seed: Some(seed),
            turns: TurnScope::FirstHuman,
        }
    }

    pub fn round_robin() -> Self {
        AugmentPolicy {
            mode: AssignMode::RoundRobin,
            seed: None,
            turns: TurnScope::FirstHuman,
        }
    }

    pub fn with_turns(mut self, turns: TurnScope) -> Self {
        self.turns = turns;
        self
    }

    fn check(&self) -> Result<()> {
        if self.mode == AssignMode::PerRecordRandom && self.seed.is_none() {
            return Err(Error::Config(
                "per-record random assignment requires a seed".into(),
            ));
        }
        Ok(())
    }

    /// Template position for the record at `ordinal`. Depends only on the
    /// seed and the ordinal, never on processing order.
    pub fn assign(&self, ordinal: usize, n_templates: usize) -> usize {
        match self.mode {
            AssignMode::RoundRobin => ordinal % n_templates,
            AssignMode::PerRecordRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.unwrap_or_default());
                rng.set_stream(ordinal as u64);
                rng.random_range(0..n_templates)
            }
        }
    }
}

/// Rewrite every record with its assigned template. Output has the same
/// length and order as `corpus`.
pub fn apply_templates(
    corpus: &[InstructionRecord],
    templates: &TemplateSet,
    policy: &AugmentPolicy,
) -> Result<Vec<InstructionRecord>> {
    if templates.is_empty() {
        return Err(Error::Config("template set is empty".into()));
    }
    policy.check()?;
    let n = templates.len();
    Ok(corpus
        .par_iter()
        .enumerate()
        .map(|(ordinal, record)| {
            let template = &templates.records[policy.assign(ordinal, n)].template;
            rewrite_record(record, template, policy.turns)
        })
        .collect())
}

fn rewrite_record(record: &InstructionRecord, template: &str, turns: TurnScope) -> InstructionRecord {
    let mut out = record.clone();
    let mut first = true;
    for turn in out.conversations.iter_mut().filter(|t| t.role == Role::Human) {
        if !first && turns == TurnScope::FirstHuman {
            break;
        }
        first = false;
        let split = split_instruction(&turn.value);
        turn.value = apply_template(template, &split);
    }
    out
}
