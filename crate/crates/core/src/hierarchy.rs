//! Label taxonomy: a tree under an implicit virtual root.
//!
//! Levels are 1-based; the virtual root sits at level 0 and is never a
//! classification target. Within a level, labels keep the order in which
//! they first appear in the edge list, and that order fixes every
//! per-level row index downstream.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Reserved name of the virtual root.
pub const ROOT: &str = "root";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HierarchyError {
    #[error("cycle through label `{0}`")]
    Cycle(String),
    #[error("label `{child}` has two parents: `{first}` and `{second}`")]
    MultiParent { child: String, first: String, second: String },
    #[error("label `{0}` is not reachable from the root")]
    Orphan(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("level {level} out of range 1..={depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("invalid label name {0:?}")]
    InvalidLabel(String),
    #[error("hierarchy has no labels")]
    Empty,
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

/// Immutable label tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    /// All labels, level-ascending, file order within each level.
    labels: Vec<String>,
    index: HashMap<String, usize>,
    /// Parent index per label; `None` for children of the virtual root.
    parent: Vec<Option<usize>>,
    level: Vec<usize>,
    per_level: Vec<Vec<usize>>,
}

/// A set of labels drawn from one hierarchy.
pub type LabelSet = BTreeSet<String>;

impl LabelHierarchy {
    /// Builds and validates a tree from `(parent, child)` pairs, where the
    /// parent `root` denotes the virtual root. Repeated identical edges are
    /// tolerated.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self, HierarchyError> {
        let mut seen: HashSet<&str> = HashSet::new();
        let mut order: Vec<&str> = Vec::new();
        let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut seen_edges: HashSet<(&str, &str)> = HashSet::new();
        for (p, c) in edges {
            let (p, c) = (p.as_ref(), c.as_ref());
            for name in [p, c] {
                validate_name(name)?;
                if name != ROOT && seen.insert(name) {
                    order.push(name);
                }
            }
            if c == ROOT {
                return Err(HierarchyError::InvalidLabel(c.to_string()));
            }
            if seen_edges.insert((p, c)) {
                children.entry(p).or_default().push(c);
            }
        }
        if order.is_empty() {
            return Err(HierarchyError::Empty);
        }

        if let Some(label) = find_cycle(&order, &children) {
            return Err(HierarchyError::Cycle(label.to_string()));
        }

        let mut parent_of: HashMap<&str, &str> = HashMap::new();
        for (p, c) in edges {
            let (p, c) = (p.as_ref(), c.as_ref());
            match parent_of.get(c) {
                Some(&existing) if existing != p => {
                    return Err(HierarchyError::MultiParent {
                        child: c.to_string(),
                        first: existing.to_string(),
                        second: p.to_string(),
                    })
                }
                _ => {
                    parent_of.insert(c, p);
                }
            }
        }

        // breadth-first from the virtual root
        let mut depth: HashMap<&str, usize> = HashMap::new();
        let mut queue = VecDeque::from([(ROOT, 0usize)]);
        while let Some((node, d)) = queue.pop_front() {
            if let Some(kids) = children.get(node) {
                for &k in kids {
                    if !depth.contains_key(k) {
                        depth.insert(k, d + 1);
                        queue.push_back((k, d + 1));
                    }
                }
            }
        }
        if let Some(orphan) = order.iter().find(|l| !depth.contains_key(*l)) {
            return Err(HierarchyError::Orphan(orphan.to_string()));
        }

        let max_depth = depth.values().copied().max().unwrap_or(0);
        let mut labels = Vec::with_capacity(order.len());
        for h in 1..=max_depth {
            labels.extend(order.iter().filter(|l| depth[*l] == h).map(|l| l.to_string()));
        }
        let index: HashMap<String, usize> = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        let parent = labels
            .iter()
            .map(|l| {
                let p = parent_of[l.as_str()];
                (p != ROOT).then(|| index[p])
            })
            .collect();
        let level: Vec<usize> = labels.iter().map(|l| depth[l.as_str()]).collect();
        let mut per_level = vec![Vec::new(); max_depth];
        for (i, &h) in level.iter().enumerate() {
            per_level[h - 1].push(i);
        }
        Ok(Self { labels, index, parent, level, per_level })
    }

    /// Parses the tab-separated edge file format.
    pub fn parse(text: &str, source: &str) -> Result<Self, HierarchyError> {
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(c), None) if !p.is_empty() && !c.is_empty() => {
                    edges.push((p.to_string(), c.to_string()))
                }
                _ => {
                    return Err(HierarchyError::Parse {
                        path: source.to_string(),
                        line: i + 1,
                        message: "expected `parent<TAB>child`".into(),
                    })
                }
            }
        }
        Self::from_edges(&edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HierarchyError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HierarchyError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Number of labels, `M`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Maximum depth, `H`.
    pub fn depth(&self) -> usize {
        self.per_level.len()
    }

    /// Labels in global output order: levels ascending, file order within.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    /// Position of `label` in global output order.
    pub fn global_index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn level_of(&self, label: &str) -> Option<usize> {
        self.global_index(label).map(|i| self.level[i])
    }

    /// Parent label, or `None` for children of the virtual root.
    pub fn parent_of(&self, label: &str) -> Option<&str> {
        let i = self.global_index(label)?;
        self.parent[i].map(|p| self.labels[p].as_str())
    }

    pub fn labels_at_level(&self, level: usize) -> Result<Vec<&str>, HierarchyError> {
        let ids = self.level_ids(level)?;
        Ok(ids.iter().map(|&i| self.labels[i].as_str()).collect())
    }

    pub(crate) fn level_ids(&self, level: usize) -> Result<&[usize], HierarchyError> {
        if level == 0 || level > self.depth() {
            return Err(HierarchyError::LevelOutOfRange { level, depth: self.depth() });
        }
        Ok(&self.per_level[level - 1])
    }

    /// `|labels at level h|` for `h = 1..=H`.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.per_level.iter().map(Vec::len).collect()
    }

    /// Position of `label` within its level.
    pub fn position_in_level(&self, label: &str) -> Option<usize> {
        let i = self.global_index(label)?;
        // per-level lists are contiguous slices of the global order
        let start: usize = self.per_level[..self.level[i] - 1].iter().map(Vec::len).sum();
        Some(i - start)
    }

    /// Smallest superset of `set` closed under "label implies its ancestors".
    pub fn ancestor_closure<S: AsRef<str>>(
        &self,
        set: impl IntoIterator<Item = S>,
    ) -> Result<LabelSet, HierarchyError> {
        let mut out = LabelSet::new();
        for label in set {
            let label = label.as_ref();
            let mut cur = self.global_index(label).ok_or_else(|| HierarchyError::UnknownLabel(label.to_string()))?;
            loop {
                if !out.insert(self.labels[cur].clone()) {
                    break;
                }
                match self.parent[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
        }
        Ok(out)
    }

    /// Edges in canonical order, with `root` as the virtual parent.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (self.parent[i].map_or(ROOT, |p| self.labels[p].as_str()), l.as_str()))
            .collect()
    }

    /// Stable SHA-256 hex digest of the canonical edge list.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (p, c) in self.edges() {
            hasher.update(p.as_bytes());
            hasher.update(b"\t");
            hasher.update(c.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn validate_name(name: &str) -> Result<(), HierarchyError> {
    if name.is_empty() || name.contains('\t') || name.contains('\n') {
        return Err(HierarchyError::InvalidLabel(name.to_string()));
    }
    Ok(())
}

/// Iterative three-colour DFS over the edge graph.
fn find_cycle<'a>(order: &[&'a str], children: &HashMap<&'a str, Vec<&'a str>>) -> Option<&'a str> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    let mut mark: HashMap<&str, Mark> = HashMap::new();
    for &start in std::iter::once(&ROOT).chain(order.iter()) {
        if mark.contains_key(start) {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        mark.insert(start, Mark::Active);
        while let Some((node, next)) = stack.pop() {
            let kids = children.get(node).map(Vec::as_slice).unwrap_or(&[]);
            if next < kids.len() {
                stack.push((node, next + 1));
                let k = kids[next];
                match mark.get(k) {
                    Some(Mark::Active) => return Some(k),
                    Some(Mark::Done) => {}
                    None => {
                        mark.insert(k, Mark::Active);
                        stack.push((k, 0));
                    }
                }
            } else {
                mark.insert(node, Mark::Done);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(edges: &[(&str, &str)]) -> Result<LabelHierarchy, HierarchyError> {
        LabelHierarchy::from_edges(edges)
    }

    #[test]
    fn chain_levels() {
        let hier = h(&[("root", "A"), ("A", "B")]).unwrap();
        assert_eq!(hier.level_of("A"), Some(1));
        assert_eq!(hier.level_of("B"), Some(2));
        assert_eq!(hier.depth(), 2);
        assert_eq!(hier.len(), 2);
        assert_eq!(hier.parent_of("B"), Some("A"));
        assert_eq!(hier.parent_of("A"), None);
    }

    #[test]
    fn explicit_cycle() {
        let err = h(&[("root", "A"), ("A", "B"), ("B", "A")]).unwrap_err();
        assert!(matches!(err, HierarchyError::Cycle(_)), "{err:?}");
    }

    #[test]
    fn detached_cycle_is_a_cycle() {
        let err = h(&[("root", "A"), ("X", "Y"), ("Y", "X")]).unwrap_err();
        assert!(matches!(err, HierarchyError::Cycle(_)));
    }

    #[test]
    fn two_parents() {
        let err = h(&[("root", "A"), ("root", "B"), ("A", "C"), ("B", "C")]).unwrap_err();
        assert_eq!(err, HierarchyError::MultiParent { child: "C".into(), first: "A".into(), second: "B".into() });
    }

    #[test]
    fn repeated_edge_is_fine() {
        let hier = h(&[("root", "A"), ("root", "A")]).unwrap();
        assert_eq!(hier.len(), 1);
    }

    #[test]
    fn orphan() {
        let err = h(&[("root", "A"), ("X", "Y")]).unwrap_err();
        assert_eq!(err, HierarchyError::Orphan("X".into()));
    }

    #[test]
    fn root_as_child_is_rejected() {
        assert!(matches!(h(&[("A", "root")]), Err(HierarchyError::InvalidLabel(_))));
    }

    #[test]
    fn closure_examples() {
        let hier = h(&[("root", "A"), ("A", "B")]).unwrap();
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<LabelSet>();
        assert_eq!(hier.ancestor_closure(["B"]).unwrap(), set(&["A", "B"]));
        assert_eq!(hier.ancestor_closure(Vec::<&str>::new()).unwrap(), set(&[]));
        assert_eq!(hier.ancestor_closure(["A", "B"]).unwrap(), set(&["A", "B"]));
        assert_eq!(hier.ancestor_closure(["Z"]), Err(HierarchyError::UnknownLabel("Z".into())));
    }

    #[test]
    fn level_lookup() {
        let hier = h(&[("root", "A"), ("root", "B")]).unwrap();
        assert_eq!(hier.labels_at_level(1).unwrap(), vec!["A", "B"]);
        let chain = h(&[("root", "A"), ("A", "B")]).unwrap();
        assert_eq!(chain.labels_at_level(2).unwrap(), vec!["B"]);
        assert_eq!(chain.labels_at_level(3), Err(HierarchyError::LevelOutOfRange { level: 3, depth: 2 }));
    }

    #[test]
    fn file_order_within_levels() {
        let hier = h(&[("root", "Z"), ("Z", "z2"), ("root", "A"), ("A", "a1"), ("Z", "z1")]).unwrap();
        assert_eq!(hier.labels_at_level(1).unwrap(), vec!["Z", "A"]);
        assert_eq!(hier.labels_at_level(2).unwrap(), vec!["z2", "a1", "z1"]);
        assert_eq!(hier.position_in_level("z1"), Some(2));
        assert_eq!(hier.global_index("z1"), Some(4));
    }

    #[test]
    fn parses_file_format() {
        let text = "# comment\nroot\tA\n\nA\tB\r\nroot\tC\n";
        let hier = LabelHierarchy::parse(text, "mem").unwrap();
        assert_eq!(hier.level_sizes(), vec![2, 1]);
        let err = LabelHierarchy::parse("root A\n", "mem").unwrap_err();
        assert!(matches!(err, HierarchyError::Parse { line: 1, .. }));
    }

    #[test]
    fn fingerprint_ignores_comments_and_repeats() {
        let a = LabelHierarchy::parse("root\tA\nA\tB\n", "a").unwrap();
        let b = LabelHierarchy::parse("# x\nroot\tA\nroot\tA\nA\tB\n", "b").unwrap();
        let c = LabelHierarchy::parse("root\tA\nroot\tB\n", "c").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn non_leaf_labels_at_shallow_depth_are_allowed() {
        let hier = h(&[("root", "A"), ("A", "B"), ("root", "C")]).unwrap();
        assert_eq!(hier.level_sizes(), vec![2, 1]);
    }
}
