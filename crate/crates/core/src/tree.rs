//! The four-level sentence-pattern tree and weighted descent over it.
//!
//! Level 1 splits declarative from imperative sentences, level 2 simple,
//! complex and compound sentences, level 3 the clause pattern, and level 4
//! holds one meta template per leaf. A synthetic level-0 root sits above
//! level 1 so a single descent covers the whole tree.
//!
//! Once weights are accumulated, every leaf weighs the number of templates
//! its meta template produces and every internal node the sum of its
//! children. Descending with probability proportional to weight and then
//! filling each slot uniformly gives each template probability
//! `w(leaf)/total * 1/w(leaf) = 1/total`.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::sampler::TemplateRecord;

pub const LEVEL1_LABELS: &[&str] = &["declarative", "imperative"];
pub const LEVEL2_LABELS: &[&str] = &["simple", "complex", "compound"];
pub const LEVEL3_LABELS: &[&str] = &[
    "subject-predicate",
    "subject-predicate-object",
    "subject-subject",
    "noun clause",
    "gerund clause",
    "linking clause",
];
pub const LEAF_LEVEL: u8 = 4;
const ROOT_ID: &str = "<root>";

/// Owned, nested form of a tree node, used to build a [`WeightedTree`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: String,
    pub level: u8,
    pub label: String,
    pub children: Vec<TreeNode>,
    /// Id of the meta template carried by a leaf.
    pub meta: Option<String>,
}

impl TreeNode {
    pub fn branch(
        id: impl Into<String>,
        level: u8,
        label: impl Into<String>,
        children: Vec<TreeNode>,
    ) -> Self {
        TreeNode {
            id: id.into(),
            level,
            label: label.into(),
            children,
            meta: None,
        }
    }

    /// A level-4 leaf whose id and label are the meta template id.
    pub fn leaf(meta_id: impl Into<String>) -> Self {
        let id = meta_id.into();
        TreeNode {
            label: id.clone(),
            meta: Some(id.clone()),
            id,
            level: LEAF_LEVEL,
            children: Vec::new(),
        }
    }
}

/// A node of the flattened tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedNode {
    pub id: String,
    pub level: u8,
    pub label: String,
    /// Indices into [`WeightedTree::nodes`].
    pub children: Vec<usize>,
    pub meta: Option<String>,
    pub weight: u64,
    /// `cumulative[i]` is the summed weight of children `0..=i`.
    cumulative: Vec<u64>,
}

impl WeightedNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Leaf position in depth-first order together with its index interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafSpan {
    pub node: usize,
    pub meta: String,
    pub path: Vec<String>,
    pub offset: u64,
    pub count: u64,
}

/// Flattened pattern tree. Nodes are stored breadth first, so index order
/// is a topological order and node 0 is the synthetic root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedTree {
    nodes: Vec<WeightedNode>,
    accumulated: bool,
}

impl WeightedTree {
    /// Build from the level-1 nodes, checking structure.
    pub fn new(level1: Vec<TreeNode>) -> Result<Self> {
        let root = TreeNode::branch(ROOT_ID, 0, "root", level1);
        check_structure(&root)?;

        let mut nodes = Vec::new();
        let mut queue = std::collections::VecDeque::from([root]);
        // Children of the node at position `i` are pushed contiguously; the
        // index of the first child is known when the parent is popped.
        while let Some(node) = queue.pop_front() {
            let first_child = nodes.len() + queue.len() + 1;
            let children = (first_child..first_child + node.children.len()).collect();
            nodes.push(WeightedNode {
                id: node.id,
                level: node.level,
                label: node.label,
                children,
                meta: node.meta,
                weight: 0,
                cumulative: Vec::new(),
            });
            queue.extend(node.children);
        }
        Ok(WeightedTree {
            nodes,
            accumulated: false,
        })
    }

    pub fn nodes(&self) -> &[WeightedNode] {
        &self.nodes
    }

    pub fn root(&self) -> &WeightedNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: &str) -> Option<&WeightedNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn is_accumulated(&self) -> bool {
        self.accumulated
    }

    /// Set each leaf weight to its template count, then sum children into
    /// parents in reverse topological order. Weights are recomputed from
    /// scratch, so calling this again is harmless.
    pub fn accumulate_weights(&mut self, grammar: &Grammar) -> Result<()> {
        self.accumulated = false;
        for node in self.nodes.iter_mut().filter(|n| n.is_leaf()) {
            let meta_id = node.meta.as_deref().expect("leaves carry a meta");
            let meta = grammar.meta(meta_id)?;
            node.weight = grammar.count_templates(meta)?;
        }
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].is_leaf() {
                continue;
            }
            let mut cumulative = Vec::with_capacity(self.nodes[i].children.len());
            let mut sum = 0u64;
            for &c in &self.nodes[i].children {
                sum = sum
                    .checked_add(self.nodes[c].weight)
                    .ok_or_else(|| Error::CountOverflow(self.nodes[i].id.clone()))?;
                cumulative.push(sum);
            }
            let node = &mut self.nodes[i];
            node.weight = sum;
            node.cumulative = cumulative;
        }
        self.accumulated = true;
        Ok(())
    }

    /// Consuming form of [`WeightedTree::accumulate_weights`].
    pub fn accumulated(mut self, grammar: &Grammar) -> Result<Self> {
        self.accumulate_weights(grammar)?;
        Ok(self)
    }

    /// Size of the template space: the root weight.
    pub fn total_count(&self) -> Result<u64> {
        if !self.accumulated {
            return Err(Error::NotAccumulated);
        }
        Ok(self.nodes[0].weight)
    }

    fn ensure_accumulated(&self) -> Result<u64> {
        let total = self.total_count()?;
        if total == 0 {
            return Err(Error::EmptySpace);
        }
        Ok(total)
    }

    /// Child of `node` whose cumulative interval contains `target`, with the
    /// summed weight of the siblings before it.
    fn locate_child(&self, node: usize, target: u64) -> (usize, u64) {
        let n = &self.nodes[node];
        let pos = n.cumulative.partition_point(|&c| c <= target);
        let before = if pos == 0 { 0 } else { n.cumulative[pos - 1] };
        (n.children[pos], before)
    }

    /// Draw one template: weighted descent from the root, then one uniform
    /// candidate per slot.
    pub fn sample_template<R: Rng + ?Sized>(
        &self,
        grammar: &Grammar,
        rng: &mut R,
    ) -> Result<TemplateRecord> {
        self.ensure_accumulated()?;
        let mut at = 0;
        let mut offset = 0u64;
        let mut leaf_path = Vec::new();
        while !self.nodes[at].is_leaf() {
            let draw = rng.random_range(0..self.nodes[at].weight);
            let (child, before) = self.locate_child(at, draw);
            offset += before;
            at = child;
            leaf_path.push(self.nodes[at].id.clone());
        }
        let meta = grammar.meta(self.nodes[at].meta.as_deref().expect("leaf meta"))?;
        let choices: Vec<usize> = grammar
            .slot_sizes(meta)?
            .into_iter()
            .map(|size| rng.random_range(0..size as usize))
            .collect();
        let local = grammar.choices_to_index(meta, &choices)?;
        Ok(TemplateRecord {
            global_index: offset + local,
            template: grammar.render(meta, &choices)?,
            leaf_path,
            choices,
        })
    }

    /// The template with the given global index, found by descending on
    /// cumulative weights and decoding the residual inside the leaf.
    pub fn template_at(&self, grammar: &Grammar, global_index: u64) -> Result<TemplateRecord> {
        let total = self.ensure_accumulated()?;
        if global_index >= total {
            return Err(Error::IndexOutOfRange {
                index: global_index,
                len: total,
            });
        }
        let mut at = 0;
        let mut rest = global_index;
        let mut leaf_path = Vec::new();
        while !self.nodes[at].is_leaf() {
            let (child, before) = self.locate_child(at, rest);
            rest -= before;
            at = child;
            leaf_path.push(self.nodes[at].id.clone());
        }
        let meta = grammar.meta(self.nodes[at].meta.as_deref().expect("leaf meta"))?;
        let choices = grammar.index_to_choices(meta, rest)?;
        Ok(TemplateRecord {
            global_index,
            template: grammar.render(meta, &choices)?,
            leaf_path,
            choices,
        })
    }

    /// Global index of the template identified by a leaf path and choice
    /// vector. Inverse of [`WeightedTree::template_at`].
    pub fn index_of(&self, grammar: &Grammar, leaf_path: &[String], choices: &[usize]) -> Result<u64> {
        self.total_count()?;
        let mut at = 0;
        let mut offset = 0u64;
        for step in leaf_path {
            let node = &self.nodes[at];
            let pos = node
                .children
                .iter()
                .position(|&c| &self.nodes[c].id == step)
                .ok_or_else(|| Error::Structure {
                    node: node.id.clone(),
                    reason: format!("no child `{step}`"),
                })?;
            if pos > 0 {
                offset += node.cumulative[pos - 1];
            }
            at = node.children[pos];
        }
        let leaf = &self.nodes[at];
        let meta_id = leaf.meta.as_deref().ok_or_else(|| Error::Structure {
            node: leaf.id.clone(),
            reason: "path does not end at a leaf".into(),
        })?;
        let local = grammar.choices_to_index(grammar.meta(meta_id)?, choices)?;
        Ok(offset + local)
    }

    /// Leaves in depth-first order with their offsets into the global index
    /// space.
    pub fn leaves(&self) -> Result<Vec<LeafSpan>> {
        self.total_count()?;
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.collect_leaves(0, &mut 0, &mut path, &mut out);
        Ok(out)
    }

    fn collect_leaves(
        &self,
        at: usize,
        offset: &mut u64,
        path: &mut Vec<String>,
        out: &mut Vec<LeafSpan>,
    ) {
        let node = &self.nodes[at];
        if node.is_leaf() {
            out.push(LeafSpan {
                node: at,
                meta: node.meta.clone().expect("leaf meta"),
                path: path.clone(),
                offset: *offset,
                count: node.weight,
            });
            *offset += node.weight;
            return;
        }
        for &c in &node.children {
            path.push(self.nodes[c].id.clone());
            self.collect_leaves(c, offset, path, out);
            path.pop();
        }
    }
}

fn check_structure(root: &TreeNode) -> Result<()> {
    let mut ids = HashSet::new();
    let mut metas = HashSet::new();
    check_node(root, 0, &mut ids, &mut metas)
}

fn check_node<'a>(
    node: &'a TreeNode,
    expected_level: u8,
    ids: &mut HashSet<&'a str>,
    metas: &mut HashSet<&'a str>,
) -> Result<()> {
    let fail = |reason: String| Error::Structure {
        node: node.id.clone(),
        reason,
    };
    if node.level != expected_level {
        return Err(fail(format!(
            "declared level {} but sits at level {expected_level}",
            node.level
        )));
    }
    if !ids.insert(&node.id) {
        return Err(fail("duplicate node id".into()));
    }
    let allowed = match expected_level {
        1 => Some(LEVEL1_LABELS),
        2 => Some(LEVEL2_LABELS),
        3 => Some(LEVEL3_LABELS),
        _ => None,
    };
    if let Some(allowed) = allowed {
        if !allowed.contains(&node.label.as_str()) {
            return Err(fail(format!(
                "label `{}` is not a level-{expected_level} pattern (expected one of {allowed:?})",
                node.label
            )));
        }
    }
    if expected_level == LEAF_LEVEL {
        if !node.children.is_empty() {
            return Err(fail("level-4 node has children".into()));
        }
        let meta = node
            .meta
            .as_deref()
            .ok_or_else(|| fail("leaf carries no meta template".into()))?;
        if !metas.insert(meta) {
            return Err(fail(format!("meta template `{meta}` appears in more than one leaf")));
        }
        return Ok(());
    }
    if node.meta.is_some() {
        return Err(fail(format!("meta template on a level-{expected_level} node")));
    }
    if node.children.is_empty() {
        return Err(fail(format!("level-{expected_level} node has no children")));
    }
    for child in &node.children {
        check_node(child, expected_level + 1, ids, metas)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{MetaTemplate, Segment, SynonymSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Leaf `a` has one template, leaf `b` three.
    pub(crate) fn toy() -> (Grammar, WeightedTree) {
        let a = MetaTemplate::new("a", vec![Segment::fixed("{question}\n{choices}")]);
        let b = MetaTemplate::new(
            "b",
            vec![
                Segment::slot("verb"),
                Segment::fixed(": {question}\n{choices}"),
            ],
        );
        let g = Grammar::new(
            [SynonymSet::new("verb", ["Answer", "Solve", "Respond"])],
            vec![a, b],
        );
        let t = WeightedTree::new(vec![TreeNode::branch(
            "imp",
            1,
            "imperative",
            vec![TreeNode::branch(
                "imp-simple",
                2,
                "simple",
                vec![TreeNode::branch(
                    "imp-spo",
                    3,
                    "subject-predicate-object",
                    vec![TreeNode::leaf("a"), TreeNode::leaf("b")],
                )],
            )],
        )])
        .unwrap();
        (g, t)
    }

    fn chain(leaf: TreeNode) -> Vec<TreeNode> {
        vec![TreeNode::branch(
            "d",
            1,
            "declarative",
            vec![TreeNode::branch(
                "d-s",
                2,
                "simple",
                vec![TreeNode::branch("d-s-sp", 3, "subject-predicate", vec![leaf])],
            )],
        )]
    }

    #[test]
    fn parent_weight_sums_children() {
        let sets = [
            SynonymSet::new("x", (0..3).map(|i| i.to_string())),
            SynonymSet::new("y", (0..4).map(|i| format!("y{i}"))),
            SynonymSet::new("z", (0..2).map(|i| format!("z{i}"))),
        ];
        let m1 = MetaTemplate::new(
            "m1",
            vec![Segment::slot("x"), Segment::slot("y"), Segment::fixed("{question}{choices}")],
        );
        let m2 = MetaTemplate::new(
            "m2",
            vec![Segment::slot("y"), Segment::slot("z"), Segment::fixed("{question}{choices}")],
        );
        let g = Grammar::new(sets, vec![m1, m2]);
        let t = WeightedTree::new(vec![TreeNode::branch(
            "d",
            1,
            "declarative",
            vec![TreeNode::branch(
                "d-s",
                2,
                "simple",
                vec![TreeNode::branch(
                    "p",
                    3,
                    "subject-predicate",
                    vec![TreeNode::leaf("m1"), TreeNode::leaf("m2")],
                )],
            )],
        )])
        .unwrap()
        .accumulated(&g)
        .unwrap();
        assert_eq!(t.node("m1").unwrap().weight, 12);
        assert_eq!(t.node("m2").unwrap().weight, 8);
        assert_eq!(t.node("p").unwrap().weight, 20);
        assert_eq!(t.total_count().unwrap(), 20);
    }

    #[test]
    fn chain_propagates_leaf_weight() {
        let m = MetaTemplate::new(
            "m",
            vec![Segment::slot("s"), Segment::fixed("{question}{choices}")],
        );
        let g = Grammar::new([SynonymSet::new("s", (0..7).map(|i| i.to_string()))], vec![m]);
        let t = WeightedTree::new(chain(TreeNode::leaf("m")))
            .unwrap()
            .accumulated(&g)
            .unwrap();
        for n in t.nodes() {
            assert_eq!(n.weight, 7, "{}", n.id);
        }
    }

    #[test]
    fn accumulation_is_idempotent() {
        let (g, mut t) = toy();
        t.accumulate_weights(&g).unwrap();
        let once = t.clone();
        t.accumulate_weights(&g).unwrap();
        assert_eq!(once, t);
        assert_eq!(t.total_count().unwrap(), 4);
    }

    #[test]
    fn total_requires_accumulation() {
        let (_, t) = toy();
        assert!(matches!(t.total_count(), Err(Error::NotAccumulated)));
    }

    #[test]
    fn structure_errors_name_the_node() {
        let err = WeightedTree::new(vec![TreeNode::branch("d", 1, "declarative", vec![])])
            .unwrap_err();
        assert!(matches!(err, Error::Structure { ref node, .. } if node == "d"), "{err}");

        // Leaf hung directly under level 2.
        let err = WeightedTree::new(vec![TreeNode::branch(
            "d",
            1,
            "declarative",
            vec![TreeNode::branch("d-s", 2, "simple", vec![TreeNode::leaf("m")])],
        )])
        .unwrap_err();
        assert!(matches!(err, Error::Structure { ref node, .. } if node == "m"), "{err}");

        let err = WeightedTree::new(vec![TreeNode::branch("d", 1, "question", vec![])])
            .unwrap_err();
        assert!(err.to_string().contains("not a level-1 pattern"));
    }

    #[test]
    fn unknown_meta_fails_accumulation() {
        let (g, _) = toy();
        let mut t = WeightedTree::new(chain(TreeNode::leaf("zzz"))).unwrap();
        assert!(matches!(t.accumulate_weights(&g), Err(Error::UnknownMeta(_))));
        assert!(!t.is_accumulated());
    }

    #[test]
    fn single_zero_slot_leaf_always_drawn() {
        let m = MetaTemplate::new("m", vec![Segment::fixed("Question: {question}\nChoices: {choices}")]);
        let g = Grammar::new([], vec![m]);
        let t = WeightedTree::new(chain(TreeNode::leaf("m")))
            .unwrap()
            .accumulated(&g)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let r = t.sample_template(&g, &mut rng).unwrap();
            assert_eq!(r.template, "Question: {question}\nChoices: {choices}");
            assert_eq!(r.global_index, 0);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_sequence() {
        let (g, t) = toy();
        let t = t.accumulated(&g).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100)
                .map(|_| t.sample_template(&g, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn sampled_record_is_consistent_with_index() {
        let (g, t) = toy();
        let t = t.accumulated(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let r = t.sample_template(&g, &mut rng).unwrap();
            assert_eq!(t.template_at(&g, r.global_index).unwrap(), r);
            assert_eq!(t.index_of(&g, &r.leaf_path, &r.choices).unwrap(), r.global_index);
        }
    }

    #[test]
    fn toy_frequencies_are_uniform() {
        let (g, t) = toy();
        let t = t.accumulated(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hist: HashMap<String, usize> = HashMap::new();
        let draws = 40_000;
        for _ in 0..draws {
            *hist.entry(t.sample_template(&g, &mut rng).unwrap().template).or_default() += 1;
        }
        assert_eq!(hist.len(), 4);
        for (k, v) in hist {
            let f = v as f64 / draws as f64;
            assert!((f - 0.25).abs() <= 0.02, "{k}: {f}");
        }
    }

    #[test]
    fn template_at_bounds() {
        let (g, t) = toy();
        let t = t.accumulated(&g).unwrap();
        let r = t.template_at(&g, 2).unwrap();
        assert_eq!(r.leaf_path.last().unwrap(), "b");
        assert_eq!(r.choices, vec![1]);
        assert!(matches!(
            t.template_at(&g, 4),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn leaf_spans_tile_the_space() {
        let (g, t) = toy();
        let t = t.accumulated(&g).unwrap();
        let leaves = t.leaves().unwrap();
        assert_eq!(leaves.len(), 2);
        assert_eq!((leaves[0].offset, leaves[0].count), (0, 1));
        assert_eq!((leaves[1].offset, leaves[1].count), (1, 3));
        assert_eq!(leaves[1].path, vec!["imp", "imp-simple", "imp-spo", "b"]);
    }
}
