//! Dependency-tree algorithms: validation, least common ancestor, and the
//! two entity-pair path extractions (sub-tree path and shortest dependency path).
//!
//! Trees come from upstream parser annotations; nothing here produces parses.

use std::ops::Range;

use crate::error::TreeError;

/// A validated dependency tree over the tokens of one sentence.
///
/// `parents[i]` is `None` exactly for the root. Validation guarantees a single
/// root, in-range parents, and no cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct DepTree {
    parents: Vec<Option<usize>>,
    root: usize,
    labels: Vec<String>,
}

/// Token indices into the original sentence, kept in sentence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPath(Vec<usize>);

impl TokenPath {
    /// Builds a path from a strictly increasing, non-empty index list.
    fn new(indices: Vec<usize>) -> Self {
        debug_assert!(!indices.is_empty());
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        TokenPath(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }
}

impl DepTree {
    /// Validates a head array (`-1` marks the root) and builds the tree.
    pub fn from_heads(heads: &[i64]) -> Result<DepTree, TreeError> {
        if heads.is_empty() {
            return Err(TreeError::Empty);
        }
        let n = heads.len();
        let mut parents = Vec::with_capacity(n);
        for (node, &h) in heads.iter().enumerate() {
            if h == -1 {
                parents.push(None);
            } else if h >= 0 && (h as usize) < n {
                parents.push(Some(h as usize));
            } else {
                return Err(TreeError::ParentOutOfRange { node, parent: h });
            }
        }

        // Cycle detection first: mutual-parent arrays like [1, 0] are reported
        // as cycles, not as missing roots.
        // state: 0 = unvisited, 1 = on the current walk, 2 = known good
        let mut state = vec![0u8; n];
        let mut walk = Vec::new();
        for start in 0..n {
            if state[start] != 0 {
                continue;
            }
            walk.clear();
            let mut cur = start;
            loop {
                match state[cur] {
                    1 => return Err(TreeError::Cycle { node: cur }),
                    2 => break,
                    _ => {}
                }
                state[cur] = 1;
                walk.push(cur);
                match parents[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            for &v in &walk {
                state[v] = 2;
            }
        }

        let mut root = None;
        for (i, p) in parents.iter().enumerate() {
            if p.is_none() {
                match root {
                    None => root = Some(i),
                    Some(first) => return Err(TreeError::MultipleRoots { first, second: i }),
                }
            }
        }
        let root = root.ok_or(TreeError::NoRoot)?;

        Ok(DepTree {
            parents,
            root,
            labels: Vec::new(),
        })
    }

    /// Same as [`from_heads`](Self::from_heads) but keeps the arc labels.
    pub fn from_heads_labeled(heads: &[i64], labels: &[String]) -> Result<DepTree, TreeError> {
        let mut tree = Self::from_heads(heads)?;
        tree.labels = labels.to_vec();
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, token: usize) -> Option<usize> {
        self.parents[token]
    }

    pub fn label(&self, token: usize) -> Option<&str> {
        self.labels.get(token).map(String::as_str)
    }

    /// Tokens from `token` up to the root, inclusive on both ends.
    pub fn path_to_root(&self, token: usize) -> Vec<usize> {
        let mut path = vec![token];
        let mut cur = token;
        while let Some(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Number of arcs between `token` and the root.
    pub fn depth(&self, token: usize) -> usize {
        self.path_to_root(token).len() - 1
    }

    /// Deepest node lying on both root paths.
    pub fn lca(&self, i: usize, j: usize) -> usize {
        let mut on_path = vec![false; self.len()];
        for t in self.path_to_root(i) {
            on_path[t] = true;
        }
        let mut cur = j;
        loop {
            if on_path[cur] {
                return cur;
            }
            cur = self.parents[cur].expect("root path always meets the other root path");
        }
    }

    /// Sub-tree path: both anchor-to-LCA paths plus the LCA's parent, in
    /// sentence order. When the LCA is the root its parent is taken to be the
    /// LCA itself, so no extra node appears.
    pub fn stp(&self, head_anchor: usize, tail_anchor: usize) -> TokenPath {
        let lca = self.lca(head_anchor, tail_anchor);
        let mut members = self.collect_paths_to(head_anchor, tail_anchor, lca);
        let lca_parent = self.parents[lca].unwrap_or(lca);
        members[lca_parent] = true;
        Self::members_to_path(&members)
    }

    /// Shortest dependency path: both anchor-to-LCA paths, in sentence order.
    pub fn sdp(&self, head_anchor: usize, tail_anchor: usize) -> TokenPath {
        let lca = self.lca(head_anchor, tail_anchor);
        let members = self.collect_paths_to(head_anchor, tail_anchor, lca);
        Self::members_to_path(&members)
    }

    /// Syntactic head of a token span: the unique token whose parent lies
    /// outside the span. Ties or zero candidates fall back to the last token.
    pub fn entity_anchor(&self, span: &Range<usize>) -> usize {
        let mut candidate = None;
        let mut count = 0;
        for t in span.clone() {
            let outside = match self.parents[t] {
                None => true,
                Some(p) => !span.contains(&p),
            };
            if outside {
                candidate = Some(t);
                count += 1;
            }
        }
        match (candidate, count) {
            (Some(t), 1) => t,
            _ => span.end - 1,
        }
    }

    fn collect_paths_to(&self, i: usize, j: usize, lca: usize) -> Vec<bool> {
        let mut members = vec![false; self.len()];
        for start in [i, j] {
            let mut cur = start;
            loop {
                members[cur] = true;
                if cur == lca {
                    break;
                }
                cur = self.parents[cur].expect("lca lies on every descendant's root path");
            }
        }
        members
    }

    fn members_to_path(members: &[bool]) -> TokenPath {
        TokenPath::new(
            members
                .iter()
                .enumerate()
                .filter_map(|(t, &m)| m.then_some(t))
                .collect(),
        )
    }
}
