//! Dynamic draft tree construction.
//!
//! Layer-wise expansion by cumulative confidence: every node of the current
//! layer proposes its `k` most likely draft tokens, and the `k` proposals with
//! the highest prospective cumulative confidence `V` form the next layer. The
//! root is the last accepted token and is not stored in `nodes`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::cost::TreeStats;
use crate::error::{Error, Result};
use crate::lm::ModelPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: u32,
    /// Parent node index; `None` means the root.
    pub parent: Option<usize>,
    /// Draft probability of `token` given its path.
    pub confidence: f64,
    /// Product of confidences from the root to this node.
    pub cum_v: f64,
    /// Distance from the root, starting at 1.
    pub depth: u32,
    /// Position within its layer, best first.
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    pub nodes: Vec<TreeNode>,
    /// `layers[i]` holds the node indices at depth `i + 1`.
    pub layers: Vec<Vec<usize>>,
    pub root_context: Vec<u32>,
    /// Nodes (root included) whose children were proposed.
    pub expanded: usize,
}

impl DraftTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.layers.len()
    }

    /// Tokens on the path from the root to `node`, root excluded.
    pub fn path(&self, node: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.nodes[node].depth as usize);
        let mut cur = Some(node);
        while let Some(i) = cur {
            out.push(self.nodes[i].token);
            cur = self.nodes[i].parent;
        }
        out.reverse();
        out
    }

    pub fn stats(&self, candidates: usize) -> TreeStats {
        TreeStats {
            layers: self.layers.len(),
            expanded: self.expanded,
            nodes: self.nodes.len(),
            candidates,
        }
    }

    /// Rebuilds a tree from `linearize` output, recomputing confidences from
    /// the draft model. Ranks follow order of appearance within each depth.
    pub fn from_linearized(
        pair: &ModelPair<'_>,
        context: &[u32],
        tokens: &[u32],
        parents: &[Option<usize>],
    ) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        if tokens.len() != parents.len() {
            return Err(Error::DimensionMismatch {
                expected: tokens.len(),
                got: parents.len(),
            });
        }
        pair.target.check_tokens(context)?;
        pair.target.check_tokens(tokens)?;
        let mut tree = DraftTree {
            nodes: Vec::with_capacity(tokens.len()),
            layers: Vec::new(),
            root_context: context.to_vec(),
            expanded: 0,
        };
        let mut row = Vec::new();
        for (i, (&token, &parent)) in tokens.iter().zip(parents).enumerate() {
            let (path, parent_v, depth) = match parent {
                None => (Vec::new(), 1.0, 1),
                Some(p) if p < i => (tree.path(p), tree.nodes[p].cum_v, tree.nodes[p].depth + 1),
                Some(p) => return Err(Error::Contract(format!("parent {p} of entry {i} does not precede it"))),
            };
            pair.draft_row_into(pair.target.bucket(context, &path), &mut row);
            let c = row[token as usize];
            if tree.layers.len() < depth as usize {
                tree.layers.resize(depth as usize, Vec::new());
            }
            let layer = &mut tree.layers[depth as usize - 1];
            tree.nodes.push(TreeNode {
                token,
                parent,
                confidence: c,
                cum_v: parent_v * c,
                depth,
                rank: layer.len() as u32,
            });
            layer.push(i);
        }
        Ok(tree)
    }

    /// Graphviz rendering.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph draft_tree {\n  root [label=\"root\"];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                s,
                "  n{i} [label=\"{} | c={:.4} | V={:.4}\"];",
                n.token, n.confidence, n.cum_v
            );
            match n.parent {
                None => {
                    let _ = writeln!(s, "  root -> n{i};");
                }
                Some(p) => {
                    let _ = writeln!(s, "  n{p} -> n{i};");
                }
            }
        }
        s.push_str("}\n");
        s
    }
}

/// Builds the draft tree for `context` under `action`'s limits.
pub fn build_tree(pair: &ModelPair<'_>, context: &[u32], action: &Action) -> Result<DraftTree> {
    action.ensure_feasible()?;
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    pair.target.check_tokens(context)?;

    let budget = action.total_tokens as usize;
    let k = action.top_k as usize;
    let mut tree = DraftTree {
        nodes: Vec::with_capacity(budget),
        layers: Vec::with_capacity(action.depth as usize),
        root_context: context.to_vec(),
        expanded: 0,
    };
    let mut row = Vec::with_capacity(pair.target.vocab_size());
    let mut proposals: Vec<Proposal> = Vec::with_capacity(k * k);
    let order = pair.target.order();
    let mut path = Vec::with_capacity(order);

    for depth in 1..=action.depth {
        let remaining = budget - tree.nodes.len();
        if remaining == 0 {
            break;
        }
        let parents: Vec<Option<usize>> = if depth == 1 {
            vec![None]
        } else {
            // layers are stored best-first, so this is the layer's top-k by V
            tree.layers[depth as usize - 2]
                .iter()
                .take(k)
                .map(|&i| Some(i))
                .collect()
        };
        proposals.clear();
        for &parent in &parents {
            path.clear();
            let parent_v = match parent {
                None => 1.0,
                Some(p) => {
                    // only the most recent `order` tokens select the row
                    let mut cur = Some(p);
                    while let Some(i) = cur {
                        if path.len() == order {
                            break;
                        }
                        path.push(tree.nodes[i].token);
                        cur = tree.nodes[i].parent;
                    }
                    path.reverse();
                    tree.nodes[p].cum_v
                }
            };
            let bucket = pair.target.bucket(context, &path);
            for (token, c) in pair.draft_top_k(bucket, k, &mut row) {
                proposals.push(Proposal {
                    cum_v: parent_v * c,
                    token,
                    parent,
                    confidence: c,
                });
            }
        }
        tree.expanded += parents.len();
        let keep = k.min(remaining);
        if keep < proposals.len() {
            proposals.select_nth_unstable_by(keep, Proposal::order);
            proposals.truncate(keep);
        }
        proposals.sort_by(Proposal::order);
        if proposals.is_empty() {
            break;
        }
        let mut layer = Vec::with_capacity(proposals.len());
        for (rank, p) in proposals.iter().enumerate() {
            layer.push(tree.nodes.len());
            tree.nodes.push(TreeNode {
                token: p.token,
                parent: p.parent,
                confidence: p.confidence,
                cum_v: p.cum_v,
                depth,
                rank: rank as u32,
            });
        }
        tree.layers.push(layer);
    }
    Ok(tree)
}

struct Proposal {
    cum_v: f64,
    token: u32,
    parent: Option<usize>,
    confidence: f64,
}

impl Proposal {
    fn order(a: &Self, b: &Self) -> Ordering {
        b.cum_v
            .total_cmp(&a.cum_v)
            .then(a.token.cmp(&b.token))
            .then(a.parent.cmp(&b.parent))
    }
}

/// Up to `budget` node indices ordered by `V` descending, ties broken by
/// shallower depth, lower token id, then lexicographically smaller path.
/// The result is ancestor-closed.
pub fn rerank(tree: &DraftTree, budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tree.nodes.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, nb) = (&tree.nodes[a], &tree.nodes[b]);
        nb.cum_v
            .total_cmp(&na.cum_v)
            .then(na.depth.cmp(&nb.depth))
            .then(na.token.cmp(&nb.token))
            .then_with(|| tree.path(a).cmp(&tree.path(b)))
    });
    let mut included = vec![false; tree.nodes.len()];
    let mut out = Vec::with_capacity(budget.min(order.len()));
    for i in order {
        if out.len() >= budget {
            break;
        }
        if tree.nodes[i].parent.is_none_or(|p| included[p]) {
            included[i] = true;
            out.push(i);
        }
    }
    out
}

/// Topologically ordered `(tokens, parents)`; a parent index is always
/// smaller than its child's position.
pub fn linearize(tree: &DraftTree) -> (Vec<u32>, Vec<Option<usize>>) {
    tree.nodes.iter().map(|n| (n.token, n.parent)).unzip()
}
