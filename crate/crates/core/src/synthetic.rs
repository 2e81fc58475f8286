//! Seeded synthetic corpora and hierarchies.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::hierarchy::{HierarchyError, LabelHierarchy, ROOT};

/// Shape of a two-level corpus where each leaf owns one signature token.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub documents: usize,
    pub parents: usize,
    pub children_per_parent: usize,
    /// Distinct tokens, signatures included.
    pub vocab: usize,
    /// Filler tokens per document.
    pub filler_len: usize,
    /// Occurrences of the leaf's signature token per document.
    pub signature_repeats: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            documents: 60,
            parents: 3,
            children_per_parent: 2,
            vocab: 40,
            filler_len: 9,
            signature_repeats: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub hierarchy: LabelHierarchy,
    pub documents: Vec<Document>,
    /// Leaf label → its signature token.
    pub signatures: BTreeMap<String, String>,
    /// Leaf label of each document, aligned with `documents`.
    pub leaves: Vec<String>,
}

impl SyntheticCorpus {
    /// Hierarchy edges in the tab-separated file format.
    pub fn hierarchy_text(&self) -> String {
        self.hierarchy.edges().iter().map(|(p, c)| format!("{p}\t{c}\n")).collect()
    }
}

/// Builds the corpus. Leaves are assigned round-robin, so every leaf gets
/// `documents / leaves` documents (the remainder going to the first leaves).
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, HierarchyError> {
    let leaves_total = spec.parents * spec.children_per_parent;
    assert!(leaves_total > 0, "need at least one leaf");
    assert!(spec.vocab > leaves_total, "vocabulary must exceed the number of signature tokens");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut edges = Vec::new();
    let mut leaf_names = Vec::new();
    for p in 0..spec.parents {
        let parent = format!("c{}", p + 1);
        edges.push((ROOT.to_string(), parent.clone()));
        for c in 0..spec.children_per_parent {
            let child = format!("{parent}.{}", c + 1);
            edges.push((parent.clone(), child.clone()));
            leaf_names.push(child);
        }
    }
    let hierarchy = LabelHierarchy::from_edges(&edges)?;
    let signatures: BTreeMap<String, String> =
        leaf_names.iter().enumerate().map(|(i, l)| (l.clone(), format!("sig{}", i + 1))).collect();
    let fillers: Vec<String> = (0..spec.vocab - leaves_total).map(|i| format!("w{:02}", i + 1)).collect();

    let mut documents = Vec::with_capacity(spec.documents);
    let mut leaves = Vec::with_capacity(spec.documents);
    for i in 0..spec.documents {
        let leaf = &leaf_names[i % leaves_total];
        let mut tokens: Vec<String> = Vec::with_capacity(spec.filler_len + spec.signature_repeats);
        if spec.filler_len > 0 {
            // guarantees every filler token appears somewhere in the corpus
            tokens.push(fillers[i % fillers.len()].clone());
        }
        while tokens.len() < spec.filler_len {
            tokens.push(fillers[rng.gen_range(0..fillers.len())].clone());
        }
        tokens.extend(std::iter::repeat_n(signatures[leaf].clone(), spec.signature_repeats));
        tokens.shuffle(&mut rng);
        documents.push(Document::new(format!("doc{:03}", i + 1), tokens, [leaf.as_str()], &hierarchy)?);
        leaves.push(leaf.clone());
    }
    Ok(SyntheticCorpus { hierarchy, documents, signatures, leaves })
}

/// A random tree with exactly `sizes[h - 1]` labels at level `h`. Every
/// label below level 1 gets a uniformly chosen parent one level up, and
/// every label that has a level below it keeps at least one child when
/// enough children exist.
pub fn tree_with_level_sizes(sizes: &[usize], seed: u64) -> Result<LabelHierarchy, HierarchyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let mut previous: Vec<String> = vec![ROOT.to_string()];
    for (h, &q) in sizes.iter().enumerate() {
        let level: Vec<String> = (0..q).map(|i| format!("L{}-{}", h + 1, i + 1)).collect();
        for (i, label) in level.iter().enumerate() {
            let parent = if i < previous.len() { &previous[i] } else { &previous[rng.gen_range(0..previous.len())] };
            edges.push((parent.clone(), label.clone()));
        }
        previous = level;
    }
    LabelHierarchy::from_edges(&edges)
}
