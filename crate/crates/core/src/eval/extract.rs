//! Two-step answer extraction.
//!
//! Step one looks for the answer written out in one of three forms, in
//! priority order:
//!
//! 1. identifier and content, `(A) cat`;
//! 2. identifier alone, `(A)`, `A.` or `A)` as a standalone token, or an
//!    output that is a single option letter;
//! 3. choice content alone, `cat`, as a whole-word substring.
//!
//! The first form that matches anything decides. If it points at exactly one
//! choice that choice is the answer; if it points at several the output is
//! ambiguous and goes to step two. Step two ranks choices with a
//! [`SimilarityScorer`] and takes the best, lowest index on ties.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::ClientError;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Match,
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    IdentifierAndContent,
    Identifier,
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extraction {
    pub index: usize,
    pub method: Method,
    /// Which string-match rule fired; `None` for similarity.
    pub rule: Option<MatchRule>,
}

/// Ranks choices by similarity to a model output. Higher is closer.
pub trait SimilarityScorer: Send + Sync {
    fn scores(&self, output: &str, choices: &[String]) -> std::result::Result<Vec<f64>, ClientError>;
}

/// Cosine similarity of lower-cased alphanumeric token counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

fn token_counts(text: &str) -> HashMap<String, f64> {
    let mut counts = HashMap::new();
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        *counts.entry(tok.to_lowercase()).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, x)| b.get(k).map(|y| x * y))
        .sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl SimilarityScorer for LexicalScorer {
    fn scores(&self, output: &str, choices: &[String]) -> std::result::Result<Vec<f64>, ClientError> {
        let out = token_counts(output);
        Ok(choices.iter().map(|c| cosine(&out, &token_counts(c))).collect())
    }
}

impl<S: SimilarityScorer + ?Sized> SimilarityScorer for Box<S> {
    fn scores(&self, output: &str, choices: &[String]) -> std::result::Result<Vec<f64>, ClientError> {
        (**self).scores(output, choices)
    }
}

/// Answer extractor with a pluggable similarity fallback.
#[derive(Debug, Default)]
pub struct AnswerExtractor<S = LexicalScorer> {
    scorer: S,
    empty_outputs: AtomicUsize,
}

impl<S: SimilarityScorer> AnswerExtractor<S> {
    pub fn new(scorer: S) -> Self {
        AnswerExtractor {
            scorer,
            empty_outputs: AtomicUsize::new(0),
        }
    }

    /// Outputs so far that were empty and resolved to choice 0.
    pub fn empty_outputs(&self) -> usize {
        self.empty_outputs.load(Ordering::Relaxed)
    }

    pub fn extract(&self, output: &str, choices: &[String]) -> Result<Extraction> {
        if choices.is_empty() {
            return Err(Error::Config("cannot extract an answer without choices".into()));
        }
        if output.trim().is_empty() {
            self.empty_outputs.fetch_add(1, Ordering::Relaxed);
            tracing::warn!("empty model output, defaulting to choice 0");
            return Ok(Extraction {
                index: 0,
                method: Method::Similarity,
                rule: None,
            });
        }
        let rules: [(MatchRule, HitFinder); 3] = [
            (MatchRule::IdentifierAndContent, identifier_and_content_hits),
            (MatchRule::Identifier, identifier_hits),
            (MatchRule::Content, content_hits),
        ];
        for (rule, find) in rules {
            let hits = find(output, choices);
            match hits.len() {
                0 => continue,
                1 => {
                    return Ok(Extraction {
                        index: *hits.first().expect("one hit"),
                        method: Method::Match,
                        rule: Some(rule),
                    })
                }
                _ => break,
            }
        }
        let scores = self.scorer.scores(output, choices).map_err(Error::Scorer)?;
        if scores.len() != choices.len() {
            return Err(Error::Scorer(ClientError::Decode(format!(
                "scorer returned {} scores for {} choices",
                scores.len(),
                choices.len()
            ))));
        }
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(Extraction {
            index: best,
            method: Method::Similarity,
            rule: None,
        })
    }
}

/// Extract with the default lexical scorer.
pub fn extract_answer(output: &str, choices: &[String]) -> Result<Extraction> {
    AnswerExtractor::new(LexicalScorer).extract(output, choices)
}

type HitFinder = fn(&str, &[String]) -> BTreeSet<usize>;

fn letters(n: usize) -> impl Iterator<Item = (usize, char)> {
    ('A'..='Z').take(n).enumerate()
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(char::is_alphanumeric)
}

/// Byte offsets of `needle` in `haystack` with no word character on either
/// side.
fn whole_word_positions<'a>(haystack: &'a str, needle: &'a str) -> impl Iterator<Item = usize> + 'a {
    haystack.match_indices(needle).filter_map(move |(at, m)| {
        let before = haystack[..at].chars().next_back();
        let after = haystack[at + m.len()..].chars().next();
        let needle_starts_word = needle.chars().next().is_some_and(char::is_alphanumeric);
        let needle_ends_word = needle.chars().next_back().is_some_and(char::is_alphanumeric);
        let ok_before = !needle_starts_word || !is_word_char(before);
        let ok_after = !needle_ends_word || !is_word_char(after);
        (ok_before && ok_after).then_some(at)
    })
}

fn identifier_and_content_hits(output: &str, choices: &[String]) -> BTreeSet<usize> {
    let lower = output.to_lowercase();
    let mut hits = BTreeSet::new();
    for (i, letter) in letters(choices.len()) {
        let content = choices[i].trim().to_lowercase();
        if content.is_empty() {
            continue;
        }
        let id = format!("({})", letter.to_ascii_lowercase());
        for (at, _) in lower.match_indices(&id) {
            let rest = lower[at + id.len()..].trim_start();
            if rest.starts_with(&content) && !is_word_char(rest[content.len()..].chars().next()) {
                hits.insert(i);
            }
        }
    }
    hits
}

fn identifier_hits(output: &str, choices: &[String]) -> BTreeSet<usize> {
    let mut hits = BTreeSet::new();
    let trimmed = output.trim();
    let lower = output.to_lowercase();
    for (i, letter) in letters(choices.len()) {
        let l = letter.to_string();
        if trimmed == l {
            hits.insert(i);
            continue;
        }
        if lower.contains(&format!("({})", letter.to_ascii_lowercase())) {
            hits.insert(i);
            continue;
        }
        for suffix in ['.', ')'] {
            let token = format!("{letter}{suffix}");
            let found = output.match_indices(&token).any(|(at, _)| {
                let before = output[..at].chars().next_back();
                let after = output[at + token.len()..].chars().next();
                !is_word_char(before)
                    && before != Some('(')
                    && !is_word_char(after)
                    && after != Some('.')
            });
            if found {
                hits.insert(i);
            }
        }
    }
    hits
}

fn content_hits(output: &str, choices: &[String]) -> BTreeSet<usize> {
    let lower = output.to_lowercase();
    choices
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let c = c.trim().to_lowercase();
            !c.is_empty() && whole_word_positions(&lower, &c).next().is_some()
        })
        .map(|(i, _)| i)
        .collect()
}
