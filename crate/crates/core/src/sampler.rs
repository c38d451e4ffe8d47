//! Reproducible without-replacement sampling of K distinct templates.
//!
//! Indices are drawn with Floyd's algorithm over `[0, total)` and mapped to
//! templates through [`WeightedTree::template_at`], so K can go all the way
//! up to the size of the space without rejection.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::tree::WeightedTree;

/// One rendered template with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateRecord {
    #[serde(rename = "index")]
    pub global_index: u64,
    pub template: String,
    #[serde(default)]
    pub leaf_path: Vec<String>,
    #[serde(default)]
    pub choices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSetHeader {
    pub scale: u64,
    pub seed: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub scale: u64,
    pub seed: u64,
    /// Size of the space the set was drawn from.
    pub total: u64,
    pub records: Vec<TemplateRecord>,
}

/// `k` distinct values from `0..n`, uniformly over k-subsets, in the order
/// Floyd's algorithm inserts them.
pub fn floyd_distinct<R: Rng + ?Sized>(rng: &mut R, k: u64, n: u64) -> Vec<u64> {
    assert!(k <= n, "cannot draw {k} distinct values from {n}");
    let mut seen = HashSet::with_capacity(k as usize);
    let mut out = Vec::with_capacity(k as usize);
    for j in (n - k)..n {
        let t = rng.random_range(0..=j);
        let pick = if seen.insert(t) {
            t
        } else {
            seen.insert(j);
            j
        };
        out.push(pick);
    }
    out
}

/// Uniformly random ordered sample of `k` indices. Any prefix of the result
/// is itself a uniform sample of that size.
fn ordered_indices(total: u64, k: u64, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = floyd_distinct(&mut rng, k, total);
    indices.shuffle(&mut rng);
    indices
}

/// Draw `k` distinct templates, deterministic in `seed`.
pub fn sample_distinct(
    tree: &WeightedTree,
    grammar: &Grammar,
    k: u64,
    seed: u64,
) -> Result<TemplateSet> {
    sample_distinct_prefix(tree, grammar, k, k, seed)
}

/// Draw an ordered sample of `pool` templates and keep the first `k`.
/// Sets drawn with the same `pool` and seed are nested: smaller scales are
/// prefixes of larger ones.
pub fn sample_distinct_prefix(
    tree: &WeightedTree,
    grammar: &Grammar,
    k: u64,
    pool: u64,
    seed: u64,
) -> Result<TemplateSet> {
    let total = tree.total_count()?;
    if k == 0 {
        return Err(Error::Config("scale must be at least 1".into()));
    }
    if pool < k {
        return Err(Error::Config(format!(
            "prefix pool {pool} is smaller than scale {k}"
        )));
    }
    if pool > total {
        return Err(Error::Capacity {
            requested: pool,
            total,
        });
    }
    let mut indices = ordered_indices(total, pool, seed);
    indices.truncate(k as usize);
    let records = indices
        .into_iter()
        .map(|i| tree.template_at(grammar, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TemplateSet {
        scale: k,
        seed,
        total,
        records,
    })
}

impl TemplateSet {
    /// Wrap hand-written templates, e.g. a held-out evaluation set. Each
    /// record's index is its position.
    pub fn from_templates<I, S>(templates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let records: Vec<TemplateRecord> = templates
            .into_iter()
            .enumerate()
            .map(|(i, t)| TemplateRecord {
                global_index: i as u64,
                template: t.into(),
                leaf_path: Vec::new(),
                choices: Vec::new(),
            })
            .collect();
        let n = records.len() as u64;
        TemplateSet {
            scale: n,
            seed: 0,
            total: n,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn templates(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.template.as_str())
    }

    pub fn header(&self) -> TemplateSetHeader {
        TemplateSetHeader {
            scale: self.scale,
            seed: self.seed,
            total: self.total,
        }
    }

    /// Header line followed by one JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<template set>", e);
        let header = serde_json::to_string(&self.header()).map_err(|e| Error::json("header", e))?;
        writeln!(w, "{header}").map_err(io)?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::json("record", e))?;
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| {
            l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)
        });
        let io = |e| Error::io("<template set>", e);
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("template set file is empty".into()))?;
        let header: TemplateSetHeader = serde_json::from_str(&first.map_err(io)?)
            .map_err(|e| Error::json("template set header (line 1)", e))?;
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(io)?;
            let rec: TemplateRecord = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("template record (line {})", n + 1), e))?;
            records.push(rec);
        }
        if records.len() as u64 != header.scale {
            return Err(Error::Format(format!(
                "template set header announces {} records, file holds {}",
                header.scale,
                records.len()
            )));
        }
        Ok(TemplateSet {
            scale: header.scale,
            seed: header.seed,
            total: header.total,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(f)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }
}
