//! Templated multiple-choice evaluation.
//!
//! Every benchmark item is crossed with every template, the prompts are
//! sent to a [`ModelClient`], answers are pulled out of the replies with
//! [`AnswerExtractor`], and [`score`] reduces the grid to per-template
//! accuracy, its mean and its Max-Min range.

mod client;
mod extract;
mod run;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use client::{
    ClientError, EmbeddingScorer, HttpClient, HttpClientConfig, MockClient, ModelClient,
    QueryRequest, RawOutput, ReplayClient,
};
pub use extract::{
    extract_answer, AnswerExtractor, Extraction, LexicalScorer, MatchRule, Method,
    SimilarityScorer,
};
pub use run::{read_raw_outputs, run_eval, RunOptions};

use crate::error::{Error, Result};
use crate::grammar::{fill_data_slots, CHOICES_SLOT, QUESTION_SLOT};
use crate::sampler::TemplateSet;

/// Choices render as `(A) ...`, `(B) ...`; 26 letters are available.
pub const MAX_CHOICES: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub question: String,
    /// Kept in dataset order; nothing here reorders choices.
    pub choices: Vec<String>,
    #[serde(rename = "answer")]
    pub answer_index: usize,
}

impl EvalItem {
    fn check(&self) -> std::result::Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("item `{}` has fewer than two choices", self.id));
        }
        if self.choices.len() > MAX_CHOICES {
            return Err(format!("item `{}` has more than {MAX_CHOICES} choices", self.id));
        }
        if self.answer_index >= self.choices.len() {
            return Err(format!(
                "item `{}` answer {} out of range for {} choices",
                self.id,
                self.answer_index,
                self.choices.len()
            ));
        }
        Ok(())
    }
}

/// Items read from a dataset file, with the count of multi-image items that
/// were filtered out.
#[derive(Debug, Clone, Default)]
pub struct LoadedItems {
    pub items: Vec<EvalItem>,
    pub skipped_multi_image: usize,
}

/// Read line-delimited `{"id","image","question","choices","answer"}`
/// records. `image` may be a path, null, or a list; lists with more than one
/// entry mark multi-image items, which are skipped.
pub fn read_items<R: BufRead>(r: R) -> Result<LoadedItems> {
    let mut out = LoadedItems::default();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<items>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("eval item (line {})", n + 1);
        let mut v: Value = serde_json::from_str(&line).map_err(|e| Error::json(ctx(), e))?;
        if let Some(Value::Array(images)) = v.get("image") {
            match images.len() {
                0 => v["image"] = Value::Null,
                1 => v["image"] = images[0].clone(),
                _ => {
                    out.skipped_multi_image += 1;
                    continue;
                }
            }
        }
        if let Some(Value::Number(id)) = v.get("id") {
            v["id"] = Value::String(id.to_string());
        }
        let item: EvalItem = serde_json::from_value(v).map_err(|e| Error::json(ctx(), e))?;
        item.check()
            .map_err(|m| Error::Format(format!("line {}: {m}", n + 1)))?;
        out.items.push(item);
    }
    let mut ids = HashSet::new();
    if let Some(dup) = out.items.iter().find(|i| !ids.insert(i.id.as_str())) {
        return Err(Error::Format(format!("duplicate item id `{}`", dup.id)));
    }
    Ok(out)
}

pub fn load_items(path: &Path) -> Result<LoadedItems> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_items(BufReader::new(f))
}

/// One benchmark item rendered through one template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplatedItem<'a> {
    pub item: &'a EvalItem,
    /// Position of the template in its set.
    pub template_id: u64,
    pub prompt: String,
}

/// `(A) first\n(B) second...`, in the given order.
pub fn format_choices<S: AsRef<str>>(choices: &[S]) -> Result<String> {
    if choices.len() > MAX_CHOICES {
        return Err(Error::TooManyChoices(choices.len()));
    }
    Ok(choices
        .iter()
        .zip('A'..='Z')
        .map(|(c, l)| format!("({l}) {}", c.as_ref()))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// The full items × templates cross product, item-major.
pub fn build_templated_benchmark<'a>(
    items: &'a [EvalItem],
    templates: &TemplateSet,
) -> Result<Vec<TemplatedItem<'a>>> {
    if items.is_empty() {
        return Err(Error::Config("no evaluation items".into()));
    }
    if templates.is_empty() {
        return Err(Error::Config("template set is empty".into()));
    }
    let mut diags = Vec::new();
    for (i, t) in templates.templates().enumerate() {
        for slot in [QUESTION_SLOT, CHOICES_SLOT] {
            let n = t.matches(slot).count();
            if n != 1 {
                diags.push(crate::grammar::Diagnostic {
                    severity: crate::grammar::Severity::Error,
                    subject: Some(format!("template {i}")),
                    message: format!("data slot {slot} occurs {n} times, expected exactly once"),
                });
            }
        }
    }
    if !diags.is_empty() {
        return Err(Error::Invalid(diags));
    }
    let mut out = Vec::with_capacity(items.len() * templates.len());
    for item in items {
        let choices = format_choices(&item.choices)?;
        for (tid, template) in templates.templates().enumerate() {
            out.push(TemplatedItem {
                item,
                template_id: tid as u64,
                prompt: fill_data_slots(template, &item.question, &choices),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_template_accuracy: BTreeMap<u64, f64>,
    /// Unweighted mean over templates.
    pub average: f64,
    /// Best minus worst template accuracy.
    pub max_min: f64,
    pub n_items: usize,
    pub n_templates: usize,
}

impl EvalReport {
    /// `template_id,accuracy` with a header row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "template_id,accuracy")?;
        for (t, a) in &self.per_template_accuracy {
            writeln!(w, "{t},{a}")?;
        }
        w.flush()
    }
}

/// Reduce a complete grid of extracted answers to an [`EvalReport`].
///
/// Every item seen must have a response under every template seen, exactly
/// once.
pub fn score(responses: &[(TemplatedItem<'_>, usize)]) -> Result<EvalReport> {
    if responses.is_empty() {
        return Err(Error::Config("no responses to score".into()));
    }
    let items: BTreeSet<&str> = responses.iter().map(|(t, _)| t.item.id.as_str()).collect();
    let templates: BTreeSet<u64> = responses.iter().map(|(t, _)| t.template_id).collect();

    let mut seen = HashSet::new();
    let mut correct: BTreeMap<u64, usize> = templates.iter().map(|&t| (t, 0)).collect();
    for (t, predicted) in responses {
        if !seen.insert((t.item.id.as_str(), t.template_id)) {
            return Err(Error::Format(format!(
                "duplicate response for item `{}` template {}",
                t.item.id, t.template_id
            )));
        }
        if *predicted == t.item.answer_index {
            *correct.get_mut(&t.template_id).expect("template seen") += 1;
        }
    }
    let missing: Vec<(String, u64)> = items
        .iter()
        .flat_map(|i| templates.iter().map(move |&t| (*i, t)))
        .filter(|k| !seen.contains(k))
        .map(|(i, t)| (i.to_owned(), t))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }

    let n_items = items.len();
    let per_template_accuracy: BTreeMap<u64, f64> = correct
        .into_iter()
        .map(|(t, c)| (t, c as f64 / n_items as f64))
        .collect();
    let values = per_template_accuracy.values().copied();
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = values.clone().fold(f64::INFINITY, f64::min);
    let average = values.sum::<f64>() / per_template_accuracy.len() as f64;
    Ok(EvalReport {
        n_templates: per_template_accuracy.len(),
        per_template_accuracy,
        average,
        max_min: max - min,
        n_items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, answer: usize) -> EvalItem {
        EvalItem {
            id: id.into(),
            image: None,
            question: format!("What is {id}?"),
            choices: vec!["cat".into(), "dog".into()],
            answer_index: answer,
        }
    }

    /// Responses giving template t exactly `hits[t]` correct answers out of
    /// `n` items.
    fn grid<'a>(items: &'a [EvalItem], hits: &[usize]) -> Vec<(TemplatedItem<'a>, usize)> {
        let mut out = Vec::new();
        for (t, &h) in hits.iter().enumerate() {
            for (i, it) in items.iter().enumerate() {
                let predicted = if i < h { it.answer_index } else { 1 - it.answer_index };
                out.push((
                    TemplatedItem {
                        item: it,
                        template_id: t as u64,
                        prompt: String::new(),
                    },
                    predicted,
                ));
            }
        }
        out
    }

    #[test]
    fn format_choices_letters() {
        assert_eq!(format_choices(&["cat", "dog"]).unwrap(), "(A) cat\n(B) dog");
        assert_eq!(format_choices(&["yes"]).unwrap(), "(A) yes");
        let many: Vec<String> = (0..27).map(|i| i.to_string()).collect();
        assert!(matches!(format_choices(&many), Err(Error::TooManyChoices(27))));
        assert!(format_choices(&many[..26]).unwrap().ends_with("(Z) 25"));
    }

    #[test]
    fn simple_template_prompt() {
        let items = [item("x", 0)];
        let set = TemplateSet::from_templates(["{question}\n{choices}"]);
        let b = build_templated_benchmark(&items, &set).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].prompt, "What is x?\n(A) cat\n(B) dog");
    }

    #[test]
    fn benchmark_rejects_templates_without_slots() {
        let items = [item("x", 0)];
        let set = TemplateSet::from_templates(["{question} only"]);
        assert!(matches!(
            build_templated_benchmark(&items, &set),
            Err(Error::Invalid(d)) if d.len() == 1
        ));
        assert!(matches!(
            build_templated_benchmark(&[], &set),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn score_two_templates() {
        let items: Vec<_> = (0..50).map(|i| item(&i.to_string(), i % 2)).collect();
        let r = score(&grid(&items, &[23, 19])).unwrap();
        assert!((r.per_template_accuracy[&0] - 0.46).abs() < 1e-12);
        assert!((r.per_template_accuracy[&1] - 0.38).abs() < 1e-12);
        assert!((r.average - 0.42).abs() < 1e-12);
        assert!((r.max_min - 0.08).abs() < 1e-12);
        assert_eq!((r.n_items, r.n_templates), (50, 2));
    }

    #[test]
    fn score_all_correct() {
        let items: Vec<_> = (0..10).map(|i| item(&i.to_string(), 0)).collect();
        let r = score(&grid(&items, &[10, 10, 10])).unwrap();
        assert_eq!(r.average, 1.0);
        assert_eq!(r.max_min, 0.0);
    }

    #[test]
    fn score_three_templates_range() {
        let items: Vec<_> = (0..50).map(|i| item(&i.to_string(), 1)).collect();
        let r = score(&grid(&items, &[35, 34, 26])).unwrap();
        assert!((r.max_min - 0.18).abs() < 1e-12);
    }

    #[test]
    fn score_reports_missing_pairs() {
        let items: Vec<_> = (0..3).map(|i| item(&i.to_string(), 0)).collect();
        let mut g = grid(&items, &[3, 3]);
        g.remove(4);
        match score(&g) {
            Err(Error::Coverage { missing }) => assert_eq!(missing, vec![("1".to_owned(), 1)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn read_items_filters_multi_image() {
        let data = r#"{"id":"a","image":"x.png","question":"q","choices":["1","2"],"answer":1}
{"id":"b","image":["x.png","y.png"],"question":"q","choices":["1","2"],"answer":0}
{"id":3,"image":["z.png"],"question":"q","choices":["1","2","3"],"answer":2}
"#;
        let l = read_items(data.as_bytes()).unwrap();
        assert_eq!(l.skipped_multi_image, 1);
        assert_eq!(l.items.len(), 2);
        assert_eq!(l.items[1].id, "3");
        assert_eq!(l.items[1].image.as_deref(), Some("z.png"));

        let bad = r#"{"id":"a","question":"q","choices":["1","2"],"answer":2}"#;
        assert!(read_items(bad.as_bytes()).is_err());
    }

    #[test]
    fn csv_twin() {
        let items: Vec<_> = (0..2).map(|i| item(&i.to_string(), 0)).collect();
        let r = score(&grid(&items, &[2, 1])).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "template_id,accuracy\n0,1\n1,0.5\n");
    }
}
