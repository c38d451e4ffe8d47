//! Programmatic instruction-template generation.
//!
//! Instruction templates are produced from *meta templates*: fixed text
//! interleaved with slots, each slot filled from a set of interchangeable
//! phrasings. Meta templates hang off a sentence-pattern tree whose node
//! weights count the templates beneath them, so descending the tree by
//! weight and filling slots uniformly samples the whole template space
//! uniformly.
//!
//! ```
//! use metatemplate::TemplateSpace;
//! use rand::SeedableRng;
//!
//! let space = TemplateSpace::default_space();
//! assert_eq!(space.grammar.meta_count(), 24);
//! assert!(space.total() >= 15_000);
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
//! let record = space.sample_template(&mut rng)?;
//! assert!(record.template.contains("{question}"));
//!
//! let set = space.sample_distinct(100, 7)?;
//! assert_eq!(set.len(), 100);
//! # Ok::<(), metatemplate::Error>(())
//! ```
//!
//! Beyond generation the crate covers the two places templates are used:
//! [`augment`] rewrites an instruction-tuning corpus with a template set,
//! and [`eval`] crosses a multiple-choice benchmark with a template set and
//! reports accuracy per template.
//!
//! A longer walk-through lives in the guide under `book/`; its code
//! listings are compiled and run as doctests of this crate.

pub mod augment;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod sampler;
pub mod space;
pub mod tree;

pub use error::{Error, Result};
pub use grammar::{Grammar, MetaTemplate, Segment, SynonymSet, ValidationOptions};
pub use sampler::{sample_distinct, TemplateRecord, TemplateSet};
pub use space::{TemplateSpace, DEFAULT_GRAMMAR_JSON};
pub use tree::{TreeNode, WeightedTree};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/meta-templates.md")]
    mod meta_templates {}
    #[doc = include_str!("../../../book/src/pattern-tree.md")]
    mod pattern_tree {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
