//! Meta templates, synonym sets and the mixed-radix template space they span.
//!
//! A [`MetaTemplate`] is an ordered list of [`Segment`]s. Fixed segments are
//! copied verbatim; slot segments name a [`SynonymSet`] and are replaced by one
//! of its candidates. The number of concrete templates a meta template can
//! produce is the product of the sizes of the synonym sets it references.
//!
//! Every concrete template of a meta template has a *local index* in
//! `0..count`. The index is the mixed-radix number whose digits are the
//! per-slot choices, with the last slot as the least significant digit.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Data slot receiving the question text.
pub const QUESTION_SLOT: &str = "{question}";
/// Data slot receiving the formatted answer choices.
pub const CHOICES_SLOT: &str = "{choices}";

/// Metas with at most this many renderings get an exhaustive collision check.
pub const EXHAUSTIVE_COLLISION_LIMIT: u64 = 100_000;
const SPOT_CHECK_SAMPLES: u64 = 4_096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymSet {
    pub id: String,
    /// Order is significant: position is the digit value of the slot.
    pub candidates: Vec<String>,
}

impl SynonymSet {
    pub fn new<I, S>(id: impl Into<String>, candidates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SynonymSet {
            id: id.into(),
            candidates: candidates.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// One piece of a meta template.
///
/// Serialized as `{"fixed": "..."}` or `{"slot": "set-id"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Fixed(String),
    Slot(String),
}

impl Segment {
    pub fn fixed(text: impl Into<String>) -> Self {
        Segment::Fixed(text.into())
    }

    pub fn slot(set_id: impl Into<String>) -> Self {
        Segment::Slot(set_id.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTemplate {
    pub id: String,
    pub segments: Vec<Segment>,
}

impl MetaTemplate {
    pub fn new(id: impl Into<String>, segments: Vec<Segment>) -> Self {
        MetaTemplate {
            id: id.into(),
            segments,
        }
    }

    /// Number of synonym slots.
    pub fn slot_count(&self) -> usize {
        self.slot_refs().count()
    }

    pub fn slot_refs(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(r) => Some(r.as_str()),
            Segment::Fixed(_) => None,
        })
    }

    fn data_slot_occurrences(&self, slot: &str) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Fixed(t) => t.matches(slot).count(),
                Segment::Slot(_) => 0,
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// A single validation finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Meta template or synonym set the finding is about, when there is one.
    pub subject: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn error(subject: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            subject: subject.map(str::to_owned),
            message: message.into(),
        }
    }

    fn warning(subject: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            subject: subject.map(str::to_owned),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.subject {
            Some(s) => write!(f, "{sev}: {s}: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationOptions {
    /// Orphan synonym sets become errors instead of warnings.
    pub strict: bool,
    /// Render the template space and reject metas whose renderings collide.
    pub check_collisions: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            strict: false,
            check_collisions: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grammar {
    pub synonym_sets: BTreeMap<String, SynonymSet>,
    pub meta_templates: Vec<MetaTemplate>,
}

impl Grammar {
    pub fn new(
        synonym_sets: impl IntoIterator<Item = SynonymSet>,
        meta_templates: Vec<MetaTemplate>,
    ) -> Self {
        Grammar {
            synonym_sets: synonym_sets
                .into_iter()
                .map(|s| (s.id.clone(), s))
                .collect(),
            meta_templates,
        }
    }

    pub fn meta_count(&self) -> usize {
        self.meta_templates.len()
    }

    pub fn meta(&self, id: &str) -> Result<&MetaTemplate> {
        self.meta_templates
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::UnknownMeta(id.to_owned()))
    }

    fn resolve<'a>(&'a self, meta: &MetaTemplate, set: &str) -> Result<&'a SynonymSet> {
        self.synonym_sets
            .get(set)
            .ok_or_else(|| Error::UnknownSynonymSet {
                meta: meta.id.clone(),
                set: set.to_owned(),
            })
    }

    /// Radix of each slot, in slot order.
    pub fn slot_sizes(&self, meta: &MetaTemplate) -> Result<Vec<u64>> {
        meta.slot_refs()
            .map(|r| self.resolve(meta, r).map(|s| s.len() as u64))
            .collect()
    }

    /// Number of concrete templates `meta` can produce: the product of its
    /// slot sizes, 1 for a meta without slots.
    pub fn count_templates(&self, meta: &MetaTemplate) -> Result<u64> {
        self.slot_sizes(meta)?
            .into_iter()
            .try_fold(1u64, |acc, n| acc.checked_mul(n))
            .ok_or_else(|| Error::CountOverflow(meta.id.clone()))
    }

    /// Substitute `choices[j]` into the j-th slot. Fixed text, data slots
    /// included, is copied as is.
    pub fn render(&self, meta: &MetaTemplate, choices: &[usize]) -> Result<String> {
        let slots = meta.slot_count();
        if choices.len() != slots {
            return Err(Error::ChoiceLength {
                meta: meta.id.clone(),
                expected: slots,
                got: choices.len(),
            });
        }
        let mut out = String::new();
        let mut position = 0;
        for segment in &meta.segments {
            match segment {
                Segment::Fixed(text) => out.push_str(text),
                Segment::Slot(r) => {
                    let set = self.resolve(meta, r)?;
                    let choice = choices[position];
                    let candidate =
                        set.candidates
                            .get(choice)
                            .ok_or_else(|| Error::ChoiceOutOfRange {
                                meta: meta.id.clone(),
                                position,
                                choice,
                                size: set.len(),
                            })?;
                    out.push_str(candidate);
                    position += 1;
                }
            }
        }
        Ok(out)
    }

    /// Decode a local index into its choice vector.
    pub fn index_to_choices(&self, meta: &MetaTemplate, local_index: u64) -> Result<Vec<usize>> {
        let sizes = self.slot_sizes(meta)?;
        let count = self.count_templates(meta)?;
        if local_index >= count {
            return Err(Error::IndexOutOfRange {
                index: local_index,
                len: count,
            });
        }
        let mut rest = local_index;
        let mut choices = vec![0usize; sizes.len()];
        for (digit, size) in choices.iter_mut().zip(&sizes).rev() {
            *digit = (rest % size) as usize;
            rest /= size;
        }
        Ok(choices)
    }

    /// Inverse of [`Grammar::index_to_choices`].
    pub fn choices_to_index(&self, meta: &MetaTemplate, choices: &[usize]) -> Result<u64> {
        let sizes = self.slot_sizes(meta)?;
        if choices.len() != sizes.len() {
            return Err(Error::ChoiceLength {
                meta: meta.id.clone(),
                expected: sizes.len(),
                got: choices.len(),
            });
        }
        let mut index = 0u64;
        for (position, (&choice, &size)) in choices.iter().zip(&sizes).enumerate() {
            if choice as u64 >= size {
                return Err(Error::ChoiceOutOfRange {
                    meta: meta.id.clone(),
                    position,
                    choice,
                    size: size as usize,
                });
            }
            index = index * size + choice as u64;
        }
        Ok(index)
    }

    /// Render the template at `local_index`.
    pub fn render_index(&self, meta: &MetaTemplate, local_index: u64) -> Result<String> {
        let choices = self.index_to_choices(meta, local_index)?;
        self.render(meta, &choices)
    }

    /// Every rendering of `meta` in local-index order. Refuses when the
    /// space is larger than `cap`.
    pub fn enumerate_templates<'a>(
        &'a self,
        meta: &'a MetaTemplate,
        cap: u64,
    ) -> Result<Enumeration<'a>> {
        let count = self.count_templates(meta)?;
        if count > cap {
            return Err(Error::EnumerationRefused { count, cap });
        }
        Ok(Enumeration {
            grammar: self,
            meta,
            next: 0,
            count,
        })
    }

    /// Check every structural invariant of the grammar. Returns one
    /// diagnostic per violation; warnings never make a grammar unusable.
    pub fn validate(&self, options: ValidationOptions) -> Vec<Diagnostic> {
        let mut diags = Vec::new();

        if self.meta_templates.is_empty() {
            diags.push(Diagnostic::error(None, "grammar has no meta templates"));
        }

        for (key, set) in &self.synonym_sets {
            let subject = Some(key.as_str());
            if key != &set.id {
                diags.push(Diagnostic::error(
                    subject,
                    format!("synonym set stored under `{key}` has id `{}`", set.id),
                ));
            }
            if set.is_empty() {
                diags.push(Diagnostic::error(subject, "synonym set is empty"));
            }
            let mut seen = HashSet::new();
            for c in &set.candidates {
                if !seen.insert(c.as_str()) {
                    diags.push(Diagnostic::error(
                        subject,
                        format!("duplicate candidate {c:?}"),
                    ));
                }
                if c.contains(QUESTION_SLOT) || c.contains(CHOICES_SLOT) {
                    diags.push(Diagnostic::error(
                        subject,
                        format!("candidate {c:?} contains a data slot"),
                    ));
                }
            }
        }

        let mut id_seen = HashSet::new();
        for meta in &self.meta_templates {
            if !id_seen.insert(meta.id.as_str()) {
                diags.push(Diagnostic::error(
                    Some(&meta.id),
                    "duplicate meta template id",
                ));
            }
        }

        let mut referenced = BTreeSet::new();
        for meta in &self.meta_templates {
            let subject = Some(meta.id.as_str());
            for slot in [QUESTION_SLOT, CHOICES_SLOT] {
                let n = meta.data_slot_occurrences(slot);
                if n != 1 {
                    diags.push(Diagnostic::error(
                        subject,
                        format!("data slot {slot} occurs {n} times, expected exactly once"),
                    ));
                }
            }
            for r in meta.slot_refs() {
                referenced.insert(r);
                if !self.synonym_sets.contains_key(r) {
                    diags.push(Diagnostic::error(
                        subject,
                        format!("slot references unknown synonym set `{r}`"),
                    ));
                }
            }
            if let Err(Error::CountOverflow(_)) = self.count_templates(meta) {
                diags.push(Diagnostic::error(subject, "template count overflows u64"));
            }
        }

        for key in self.synonym_sets.keys() {
            if !referenced.contains(key.as_str()) {
                let msg = "synonym set is not referenced by any meta template";
                diags.push(if options.strict {
                    Diagnostic::error(Some(key), msg)
                } else {
                    Diagnostic::warning(Some(key), msg)
                });
            }
        }

        // Renderings are only meaningful once every set resolves and is
        // nonempty.
        if options.check_collisions && !diags.iter().any(Diagnostic::is_error) {
            self.check_collisions(&mut diags);
        }
        diags
    }

    /// Distinct choice vectors must give distinct strings, within a meta and
    /// across metas. Exhaustive for metas up to
    /// [`EXHAUSTIVE_COLLISION_LIMIT`] renderings, a seeded spot check above.
    fn check_collisions(&self, diags: &mut Vec<Diagnostic>) {
        let mut owner: HashMap<String, (usize, u64)> = HashMap::new();
        for (mi, meta) in self.meta_templates.iter().enumerate() {
            let Ok(count) = self.count_templates(meta) else {
                continue;
            };
            if count <= EXHAUSTIVE_COLLISION_LIMIT {
                for local in 0..count {
                    let Ok(text) = self.render_index(meta, local) else {
                        continue;
                    };
                    if let Some(&(other, other_local)) = owner.get(&text) {
                        let other_id = &self.meta_templates[other].id;
                        diags.push(Diagnostic::error(
                            Some(&meta.id),
                            format!(
                                "rendering #{local} collides with `{other_id}` #{other_local}: {text:?}"
                            ),
                        ));
                    } else {
                        owner.insert(text, (mi, local));
                    }
                }
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(count);
                let mut local_seen: HashMap<String, u64> = HashMap::new();
                for _ in 0..SPOT_CHECK_SAMPLES {
                    let local = rng.random_range(0..count);
                    let Ok(text) = self.render_index(meta, local) else {
                        continue;
                    };
                    match local_seen.get(&text) {
                        Some(&prev) if prev != local => {
                            diags.push(Diagnostic::error(
                                Some(&meta.id),
                                format!("renderings #{prev} and #{local} collide: {text:?}"),
                            ));
                        }
                        _ => {
                            local_seen.insert(text, local);
                        }
                    }
                }
            }
        }
    }
}

/// Iterator returned by [`Grammar::enumerate_templates`].
pub struct Enumeration<'a> {
    grammar: &'a Grammar,
    meta: &'a MetaTemplate,
    next: u64,
    count: u64,
}

impl Iterator for Enumeration<'_> {
    type Item = (u64, String);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let text = self
            .grammar
            .render_index(self.meta, index)
            .expect("index below count resolves");
        Some((index, text))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.count - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Enumeration<'_> {}

/// Substitute the data slots of a rendered template in a single pass, so
/// slot markers appearing inside `question` or `choices` are left alone.
pub fn fill_data_slots(template: &str, question: &str, choices: &str) -> String {
    let mut out = String::with_capacity(template.len() + question.len() + choices.len());
    let mut rest = template;
    loop {
        let q = rest.find(QUESTION_SLOT);
        let c = rest.find(CHOICES_SLOT);
        let (at, slot, value) = match (q, c) {
            (Some(q), Some(c)) if q < c => (q, QUESTION_SLOT, question),
            (Some(q), None) => (q, QUESTION_SLOT, question),
            (_, Some(c)) => (c, CHOICES_SLOT, choices),
            (None, None) => break,
        };
        out.push_str(&rest[..at]);
        out.push_str(value);
        rest = &rest[at + slot.len()..];
    }
    out.push_str(rest);
    out
}
