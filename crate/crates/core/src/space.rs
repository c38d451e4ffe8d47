//! Grammar files and the [`TemplateSpace`] they describe.
//!
//! A grammar file is one JSON document:
//!
//! ```json
//! {
//!   "synonym_sets": { "verb": ["answer", "address"] },
//!   "tree": [
//!     { "id": "imp", "label": "imperative", "children": [
//!       { "id": "imp-simple", "label": "simple", "children": [
//!         { "id": "imp-simple-spo", "label": "subject-predicate-object", "children": [
//!           { "id": "please", "segments": [
//!             { "fixed": "Please " }, { "slot": "verb" },
//!             { "fixed": " the following: {question}\n{choices}" } ] }
//!         ] } ] } ] }
//!   ]
//! }
//! ```
//!
//! `tree` lists the level-1 nodes. A node with `segments` is a leaf and is
//! itself the meta template; every other node has `id`, `label` and
//! `children`.

use std::path::Path;

use rand::Rng;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::grammar::{Diagnostic, Grammar, MetaTemplate, Segment, SynonymSet, ValidationOptions};
use crate::sampler::{self, TemplateRecord, TemplateSet};
use crate::tree::{TreeNode, WeightedTree, LEAF_LEVEL};

/// The grammar shipped with the crate: 24 meta templates organised by
/// sentence pattern.
pub const DEFAULT_GRAMMAR_JSON: &str = include_str!("../data/default_grammar.json");

#[derive(Deserialize)]
struct GrammarFile {
    synonym_sets: std::collections::BTreeMap<String, Vec<String>>,
    tree: Vec<NodeFile>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NodeFile {
    Leaf {
        id: String,
        segments: Vec<Segment>,
    },
    Branch {
        id: String,
        label: String,
        children: Vec<NodeFile>,
    },
}

/// Grammar plus its accumulated pattern tree.
#[derive(Debug, Clone)]
pub struct TemplateSpace {
    pub grammar: Grammar,
    pub tree: WeightedTree,
}

impl TemplateSpace {
    /// Assemble from parts, checking tree structure and accumulating
    /// weights. Grammar-level validation is separate, see
    /// [`TemplateSpace::validate`].
    pub fn new(grammar: Grammar, level1: Vec<TreeNode>) -> Result<Self> {
        let tree = WeightedTree::new(level1)?.accumulated(&grammar)?;
        Ok(TemplateSpace { grammar, tree })
    }

    /// Parse a grammar file. Grammar errors are reported together as
    /// [`Error::Invalid`] before the tree is assembled; the collision check
    /// is left to [`TemplateSpace::validate`].
    pub fn from_json(text: &str, strict: bool) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::json("grammar file", e))?;
        if strict {
            check_keys(&value)?;
        }
        let file: GrammarFile =
            serde_json::from_value(value).map_err(|e| Error::json("grammar file", e))?;
        let synonym_sets = file
            .synonym_sets
            .into_iter()
            .map(|(id, candidates)| SynonymSet { id, candidates });
        let mut metas = Vec::new();
        let level1 = file
            .tree
            .into_iter()
            .map(|n| convert(n, 1, &mut metas))
            .collect();
        let grammar = Grammar::new(synonym_sets, metas);
        let diags = grammar.validate(ValidationOptions {
            strict,
            check_collisions: false,
        });
        if diags.iter().any(Diagnostic::is_error) {
            return Err(Error::Invalid(diags));
        }
        Self::new(grammar, level1)
    }

    pub fn load(path: &Path, strict: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, strict)
    }

    pub fn default_space() -> Self {
        Self::from_json(DEFAULT_GRAMMAR_JSON, true).expect("bundled grammar loads")
    }

    pub fn validate(&self, options: ValidationOptions) -> Vec<Diagnostic> {
        self.grammar.validate(options)
    }

    /// Like [`TemplateSpace::validate`] but fails on any error diagnostic.
    pub fn validated(self, options: ValidationOptions) -> Result<Self> {
        let diags = self.validate(options);
        if diags.iter().any(Diagnostic::is_error) {
            return Err(Error::Invalid(diags));
        }
        Ok(self)
    }

    pub fn total(&self) -> u64 {
        self.tree.total_count().expect("accumulated on construction")
    }

    /// Per meta template counts, in grammar order.
    pub fn meta_counts(&self) -> Result<Vec<(&str, u64)>> {
        self.grammar
            .meta_templates
            .iter()
            .map(|m| Ok((m.id.as_str(), self.grammar.count_templates(m)?)))
            .collect()
    }

    pub fn sample_template<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TemplateRecord> {
        self.tree.sample_template(&self.grammar, rng)
    }

    pub fn template_at(&self, global_index: u64) -> Result<TemplateRecord> {
        self.tree.template_at(&self.grammar, global_index)
    }

    pub fn index_of(&self, record: &TemplateRecord) -> Result<u64> {
        self.tree
            .index_of(&self.grammar, &record.leaf_path, &record.choices)
    }

    pub fn sample_distinct(&self, k: u64, seed: u64) -> Result<TemplateSet> {
        sampler::sample_distinct(&self.tree, &self.grammar, k, seed)
    }
}

fn convert(node: NodeFile, level: u8, metas: &mut Vec<MetaTemplate>) -> TreeNode {
    match node {
        NodeFile::Leaf { id, segments } => {
            metas.push(MetaTemplate::new(id.clone(), segments));
            let mut leaf = TreeNode::leaf(id);
            // Structure checks report the level mismatch.
            leaf.level = level;
            leaf
        }
        NodeFile::Branch {
            id,
            label,
            children,
        } => {
            let children = children
                .into_iter()
                .map(|c| convert(c, level + 1, metas))
                .collect();
            TreeNode::branch(id, level, label, children)
        }
    }
}

fn check_keys(root: &Value) -> Result<()> {
    let obj = expect_object(root, "grammar file")?;
    only_keys(obj, &["synonym_sets", "tree"], "grammar file")?;
    if let Some(Value::Array(nodes)) = obj.get("tree") {
        for n in nodes {
            check_node_keys(n, 1)?;
        }
    }
    Ok(())
}

fn check_node_keys(node: &Value, level: u8) -> Result<()> {
    let obj = expect_object(node, "tree node")?;
    let id = obj.get("id").and_then(Value::as_str).unwrap_or("?");
    let ctx = format!("tree node `{id}`");
    if obj.contains_key("segments") || level == LEAF_LEVEL {
        only_keys(obj, &["id", "segments"], &ctx)?;
        if let Some(Value::Array(segs)) = obj.get("segments") {
            for s in segs {
                let s = expect_object(s, &ctx)?;
                if s.len() != 1 {
                    return Err(Error::Format(format!(
                        "{ctx}: segment must have exactly one of `fixed` or `slot`"
                    )));
                }
                only_keys(s, &["fixed", "slot"], &ctx)?;
            }
        }
    } else {
        only_keys(obj, &["id", "label", "children"], &ctx)?;
        if let Some(Value::Array(children)) = obj.get("children") {
            for c in children {
                check_node_keys(c, level + 1)?;
            }
        }
    }
    Ok(())
}

fn expect_object<'a>(v: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::Format(format!("{ctx}: expected a JSON object")))
}

fn only_keys(obj: &Map<String, Value>, allowed: &[&str], ctx: &str) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::Format(format!("{ctx}: unknown key `{k}`"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    const TOY: &str = r#"{
      "synonym_sets": { "verb": ["Answer", "Solve", "Respond"] },
      "tree": [
        { "id": "imp", "label": "imperative", "children": [
          { "id": "imp-simple", "label": "simple", "children": [
            { "id": "imp-spo", "label": "subject-predicate-object", "children": [
              { "id": "a", "segments": [ { "fixed": "{question}\n{choices}" } ] },
              { "id": "b", "segments": [ { "slot": "verb" }, { "fixed": ": {question}\n{choices}" } ] }
            ] } ] } ] }
      ]
    }"#;

    #[test]
    fn toy_file_loads() {
        let space = TemplateSpace::from_json(TOY, true).unwrap();
        assert_eq!(space.total(), 4);
        assert_eq!(space.grammar.meta_count(), 2);
        assert!(space.validate(ValidationOptions::default()).is_empty());
    }

    #[test]
    fn strict_mode_rejects_unknown_keys() {
        let with_extra = TOY.replacen("\"tree\"", "\"comment\": \"x\", \"tree\"", 1);
        assert!(TemplateSpace::from_json(&with_extra, false).is_ok());
        let err = TemplateSpace::from_json(&with_extra, true).unwrap_err();
        assert!(err.to_string().contains("unknown key `comment`"), "{err}");

        let leaf_extra = TOY.replacen("\"id\": \"a\",", "\"id\": \"a\", \"weight\": 3,", 1);
        assert!(TemplateSpace::from_json(&leaf_extra, true).is_err());
    }

    #[test]
    fn misplaced_leaf_is_a_structure_error() {
        let bad = r#"{ "synonym_sets": {}, "tree": [
            { "id": "d", "label": "declarative", "children": [
              { "id": "m", "segments": [ { "fixed": "{question}{choices}" } ] } ] } ] }"#;
        assert!(matches!(
            TemplateSpace::from_json(bad, false),
            Err(Error::Structure { ref node, .. }) if node == "m"
        ));
    }

    #[test]
    fn default_grammar_has_24_metas_and_15k_templates() {
        let space = TemplateSpace::default_space();
        assert_eq!(space.grammar.meta_count(), 24);
        assert!(space.total() >= 15_000, "total {}", space.total());
        let diags = space.validate(ValidationOptions {
            strict: true,
            check_collisions: true,
        });
        assert!(diags.is_empty(), "{diags:#?}");
    }

    #[test]
    fn default_grammar_covers_taxonomy() {
        let space = TemplateSpace::default_space();
        let labels: HashSet<&str> = space.tree.nodes().iter().map(|n| n.label.as_str()).collect();
        for l in crate::tree::LEVEL1_LABELS
            .iter()
            .chain(crate::tree::LEVEL2_LABELS)
            .chain(crate::tree::LEVEL3_LABELS)
        {
            assert!(labels.contains(l), "missing {l}");
        }
    }
}
