#![allow(dead_code)]

use metatemplate::tree::{LEVEL1_LABELS, LEVEL2_LABELS, LEVEL3_LABELS};
use metatemplate::{Grammar, MetaTemplate, Segment, SynonymSet, TemplateSpace, TreeNode};

/// Shape of a small random space: synonym-set sizes and, per leaf, its
/// pattern path and the sets its slots draw from.
#[derive(Debug, Clone)]
pub struct ToySpec {
    pub set_sizes: Vec<usize>,
    pub leaves: Vec<LeafSpec>,
}

#[derive(Debug, Clone)]
pub struct LeafSpec {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub slots: Vec<usize>,
}

type Level3 = Vec<(usize, Vec<String>)>;
type Level2 = Vec<(usize, Level3)>;

pub fn build(spec: &ToySpec) -> TemplateSpace {
    let sets: Vec<SynonymSet> = spec
        .set_sizes
        .iter()
        .enumerate()
        .map(|(s, &n)| SynonymSet::new(format!("s{s}"), (0..n).map(|c| format!("w{s}_{c}"))))
        .collect();
    let mut metas = Vec::new();
    // l1 -> l2 -> l3 -> leaf ids, in first-seen order
    let mut shape: Vec<(usize, Level2)> = Vec::new();
    for (i, leaf) in spec.leaves.iter().enumerate() {
        let id = format!("m{i}");
        let mut segments = vec![Segment::fixed(format!("{id}:"))];
        for &s in &leaf.slots {
            segments.push(Segment::slot(format!("s{}", s % spec.set_sizes.len())));
            segments.push(Segment::fixed(" "));
        }
        segments.push(Segment::fixed("{question} {choices}"));
        metas.push(MetaTemplate::new(id.clone(), segments));

        let a = find_or_push(&mut shape, leaf.l1);
        let b = find_or_push(a, leaf.l2);
        let c = find_or_push(b, leaf.l3);
        c.push(id);
    }
    let level1 = shape
        .into_iter()
        .map(|(l1, l2s)| {
            let p1 = format!("n{l1}");
            let kids = l2s
                .into_iter()
                .map(|(l2, l3s)| {
                    let p2 = format!("{p1}.{l2}");
                    let kids = l3s
                        .into_iter()
                        .map(|(l3, leaves)| {
                            TreeNode::branch(
                                format!("{p2}.{l3}"),
                                3,
                                LEVEL3_LABELS[l3],
                                leaves.into_iter().map(TreeNode::leaf).collect(),
                            )
                        })
                        .collect();
                    TreeNode::branch(p2, 2, LEVEL2_LABELS[l2], kids)
                })
                .collect();
            TreeNode::branch(p1, 1, LEVEL1_LABELS[l1], kids)
        })
        .collect();
    TemplateSpace::new(Grammar::new(sets, metas), level1).expect("toy space builds")
}

fn find_or_push<T: Default>(v: &mut Vec<(usize, T)>, key: usize) -> &mut T {
    let pos = match v.iter().position(|(k, _)| *k == key) {
        Some(p) => p,
        None => {
            v.push((key, T::default()));
            v.len() - 1
        }
    };
    &mut v[pos].1
}

/// Two leaves: `a` with no slots, `b` with one three-way slot.
pub fn toy_space() -> TemplateSpace {
    build(&ToySpec {
        set_sizes: vec![3],
        leaves: vec![
            LeafSpec { l1: 0, l2: 0, l3: 0, slots: vec![] },
            LeafSpec { l1: 1, l2: 0, l3: 0, slots: vec![0] },
        ],
    })
}

/// Every template, leaf by leaf in depth-first order, each leaf enumerated
/// independently of the tree's own indexing.
pub fn enumerate_all(space: &TemplateSpace) -> Vec<String> {
    let mut out = Vec::new();
    for leaf in space.tree.leaves().unwrap() {
        let meta = space.grammar.meta(&leaf.meta).unwrap();
        out.extend(
            space
                .grammar
                .enumerate_templates(meta, 1_000_000)
                .unwrap()
                .map(|(_, s)| s),
        );
    }
    out
}
