mod common;

use std::collections::{HashMap, HashSet};

use common::{build, enumerate_all, toy_space, LeafSpec, ToySpec};
use metatemplate::augment::{apply_templates, AugmentPolicy, InstructionRecord, Role, Turn, TurnScope};
use metatemplate::sampler::sample_distinct_prefix;
use metatemplate::TemplateSet;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_spec() -> impl Strategy<Value = ToySpec> {
    prop::collection::vec(1usize..=4, 1..=4).prop_flat_map(|set_sizes| {
        let n_sets = set_sizes.len();
        let leaf = (0usize..2, 0usize..3, 0usize..6, prop::collection::vec(0..n_sets, 0..=3))
            .prop_map(|(l1, l2, l3, slots)| LeafSpec { l1, l2, l3, slots });
        prop::collection::vec(leaf, 1..=8).prop_map(move |leaves| ToySpec {
            set_sizes: set_sizes.clone(),
            leaves,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn node_weight_is_sum_of_children(spec in toy_spec()) {
        let space = build(&spec);
        let nodes = space.tree.nodes();
        for n in nodes.iter().filter(|n| !n.is_leaf()) {
            let sum: u64 = n.children.iter().map(|&c| nodes[c].weight).sum();
            prop_assert_eq!(n.weight, sum);
        }
        let oracle = enumerate_all(&space);
        prop_assert_eq!(space.total(), oracle.len() as u64);
        prop_assert_eq!(oracle.iter().collect::<HashSet<_>>().len(), oracle.len());
    }

    #[test]
    fn global_indexing_is_a_bijection(spec in toy_spec()) {
        let space = build(&spec);
        let oracle: HashSet<String> = enumerate_all(&space).into_iter().collect();
        let mut seen = HashSet::new();
        for i in 0..space.total() {
            let rec = space.template_at(i).unwrap();
            prop_assert_eq!(rec.global_index, i);
            prop_assert_eq!(space.index_of(&rec).unwrap(), i);
            prop_assert!(oracle.contains(&rec.template));
            prop_assert!(seen.insert(rec.template));
        }
        prop_assert_eq!(seen.len(), oracle.len());
        prop_assert!(space.template_at(space.total()).is_err());
    }

    #[test]
    fn sampled_records_are_consistent(spec in toy_spec(), seed in any::<u64>()) {
        let space = build(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let rec = space.sample_template(&mut rng).unwrap();
            prop_assert_eq!(space.template_at(rec.global_index).unwrap(), rec);
        }
    }

    #[test]
    fn distinct_sets_are_distinct_and_deterministic(spec in toy_spec(), seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let space = build(&spec);
        let total = space.total();
        let k = ((total as f64 * frac).ceil() as u64).clamp(1, total);
        let a = space.sample_distinct(k, seed).unwrap();
        let b = space.sample_distinct(k, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len() as u64, k);
        let distinct: HashSet<_> = a.templates().collect();
        prop_assert_eq!(distinct.len() as u64, k);
        prop_assert!(space.sample_distinct(total + 1, seed).is_err());
    }

    #[test]
    fn prefix_sets_nest(spec in toy_spec(), seed in any::<u64>()) {
        let space = build(&spec);
        let total = space.total();
        let small = sample_distinct_prefix(&space.tree, &space.grammar, 1, total, seed).unwrap();
        let large = sample_distinct_prefix(&space.tree, &space.grammar, total, total, seed).unwrap();
        prop_assert_eq!(&small.records[..], &large.records[..1]);
    }
}

/// Inclusion frequency of each template over many seeded draws of size `k`,
/// from `sample_distinct` and from a rejection-sampling oracle that repeats
/// single draws until `k` distinct templates are collected.
#[test]
fn distinct_sampling_matches_rejection_oracle() {
    let space = build(&ToySpec {
        set_sizes: vec![2, 3],
        leaves: vec![
            LeafSpec { l1: 0, l2: 0, l3: 0, slots: vec![0] },
            LeafSpec { l1: 1, l2: 2, l3: 4, slots: vec![1] },
            LeafSpec { l1: 1, l2: 2, l3: 5, slots: vec![] },
        ],
    });
    let total = space.total();
    assert_eq!(total, 6);
    let k = 2u64;
    let trials = 20_000u64;

    let mut direct: HashMap<String, u64> = HashMap::new();
    let mut oracle: HashMap<String, u64> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for t in 0..trials {
        for s in space.sample_distinct(k, t).unwrap().templates() {
            *direct.entry(s.to_owned()).or_default() += 1;
        }
        let mut got = HashSet::new();
        while (got.len() as u64) < k {
            got.insert(space.sample_template(&mut rng).unwrap().template);
        }
        for s in got {
            *oracle.entry(s).or_default() += 1;
        }
    }
    let p = k as f64 / total as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    for template in enumerate_all(&space) {
        for (name, counts) in [("direct", &direct), ("oracle", &oracle)] {
            let freq = counts.get(&template).copied().unwrap_or(0) as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "{name}: {template:?} included {freq}, expected {p} ± {}",
                3.0 * se
            );
        }
    }
}

#[test]
fn single_draw_frequencies_on_toy_tree() {
    let space = toy_space();
    let mut counts: HashMap<String, u64> = HashMap::new();
    for seed in 0..10_000 {
        let set = space.sample_distinct(1, seed).unwrap();
        *counts.entry(set.records[0].template.clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    for (t, c) in counts {
        let f = c as f64 / 10_000.0;
        assert!((f - 0.25).abs() <= 0.02, "{t:?}: {f}");
    }
}

fn synthetic_corpus(n: usize) -> Vec<InstructionRecord> {
    (0..n)
        .map(|i| InstructionRecord {
            id: format!("r{i}").into(),
            image: Some(format!("img/{i}.jpg")),
            conversations: vec![
                Turn::new(Role::Human, format!("<image>\nWhat is item {i}?\nA. left\nB. right")),
                Turn::new(Role::Gpt, "A"),
                Turn::new(Role::Human, format!("And then {i}?")),
                Turn::new(Role::Gpt, "B"),
            ],
            extra: Default::default(),
        })
        .collect()
}

#[test]
fn augmentation_is_independent_of_worker_count() {
    let corpus = synthetic_corpus(500);
    let set: TemplateSet = toy_space().sample_distinct(4, 1).unwrap();
    let policy = AugmentPolicy::random(17).with_turns(TurnScope::AllHuman);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| apply_templates(&corpus, &set, &policy).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(8));
    assert_eq!(one.len(), corpus.len());
}
