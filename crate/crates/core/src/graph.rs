//! Heterogeneous document/user social graph.
//!
//! Documents carry exogenous features and a class label; users carry
//! neither. Documents are only ever adjacent to users, while users may be
//! adjacent to both. Documents and users share one dense id space and one
//! adjacency structure (CSR, neighbour lists sorted ascending).

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Document,
    User,
}

const NO_ROW: u32 = u32::MAX;

/// Immutable social graph. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct SocialGraph {
    kinds: Vec<NodeKind>,
    offsets: Vec<usize>,
    adjacency: Vec<NodeId>,
    doc_row: Vec<u32>,
    docs: Vec<NodeId>,
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl SocialGraph {
    /// Builds a graph, symmetrising and de-duplicating `edges`.
    ///
    /// `features` is row-major with one row of `feature_dim` values per
    /// document, rows ordered by ascending document id; `labels` follows the
    /// same order. Self-edges are dropped.
    pub fn new(
        kinds: Vec<NodeKind>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = kinds.len();
        if num_classes < 2 {
            return Err(Error::Input(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let mut doc_row = vec![NO_ROW; n];
        let mut docs = Vec::new();
        for (i, kind) in kinds.iter().enumerate() {
            if *kind == NodeKind::Document {
                doc_row[i] = docs.len() as u32;
                docs.push(NodeId::from(i));
            }
        }
        if labels.len() != docs.len() {
            return Err(Error::Input(format!(
                "{} labels for {} documents",
                labels.len(),
                docs.len()
            )));
        }
        if features.len() != docs.len() * feature_dim {
            return Err(Error::Input(format!(
                "feature matrix has {} values, expected {} documents x {feature_dim}",
                features.len(),
                docs.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }

        let mut pairs = Vec::new();
        for (u, v) in edges {
            if u.index() >= n || v.index() >= n {
                return Err(Error::Input(format!("edge ({}, {}) references unknown node", u.0, v.0)));
            }
            if u == v {
                continue;
            }
            if kinds[u.index()] == NodeKind::Document && kinds[v.index()] == NodeKind::Document {
                return Err(Error::Input(format!("document-document edge ({}, {})", u.0, v.0)));
            }
            pairs.push((u, v));
            pairs.push((v, u));
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut offsets = vec![0usize; n + 1];
        for &(u, _) in &pairs {
            offsets[u.index() + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let adjacency: Vec<NodeId> = pairs.into_iter().map(|(_, v)| v).collect();

        for &d in &docs {
            if offsets[d.index() + 1] == offsets[d.index()] {
                return Err(Error::Input(format!("document {} has no incident edge", d.0)));
            }
        }

        Ok(Self {
            kinds,
            offsets,
            adjacency,
            doc_row,
            docs,
            features,
            feature_dim,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.kinds.len()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.len() / 2
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn kind(&self, v: NodeId) -> NodeKind {
        self.kinds[v.index()]
    }

    pub fn is_doc(&self, v: NodeId) -> bool {
        self.kinds[v.index()] == NodeKind::Document
    }

    pub fn contains(&self, v: NodeId) -> bool {
        v.index() < self.kinds.len()
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn neighbours(&self, v: NodeId) -> &[NodeId] {
        &self.adjacency[self.offsets[v.index()]..self.offsets[v.index() + 1]]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.offsets[v.index() + 1] - self.offsets[v.index()]
    }

    /// Document nodes in ascending id order.
    pub fn docs(&self) -> &[NodeId] {
        &self.docs
    }

    pub fn users(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == NodeKind::User)
            .map(|(i, _)| NodeId::from(i))
    }

    /// Row of `v` in the feature/label tables, if `v` is a document.
    pub fn doc_row(&self, v: NodeId) -> Option<usize> {
        match self.doc_row[v.index()] {
            NO_ROW => None,
            r => Some(r as usize),
        }
    }

    pub fn label(&self, v: NodeId) -> Option<usize> {
        self.doc_row(v).map(|r| self.labels[r])
    }

    pub fn features(&self, v: NodeId) -> Option<&[f64]> {
        self.doc_row(v)
            .map(|r| &self.features[r * self.feature_dim..(r + 1) * self.feature_dim])
    }

    pub fn feature_matrix(&self) -> &[f64] {
        &self.features
    }

    /// Labels in document-row order.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Undirected edges with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            let u = NodeId::from(u);
            self.neighbours(u)
                .iter()
                .filter(move |&&v| u < v)
                .map(move |&v| (u, v))
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    fn check(&self, v: NodeId) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "unknown node id {} (graph has {} nodes)",
                v.0,
                self.num_nodes()
            )))
        }
    }

    /// Breadth-first search from `v` up to depth `r`, returning `(node, hops)`
    /// in visiting order. `v` itself comes first with distance 0.
    pub fn bfs_within(&self, v: NodeId, r: usize) -> Result<Vec<(NodeId, usize)>> {
        self.check(v)?;
        let mut seen = vec![false; self.num_nodes()];
        let mut out = vec![(v, 0)];
        let mut queue = VecDeque::from([(v, 0usize)]);
        seen[v.index()] = true;
        while let Some((u, d)) = queue.pop_front() {
            if d == r {
                continue;
            }
            for &w in self.neighbours(u) {
                if !seen[w.index()] {
                    seen[w.index()] = true;
                    out.push((w, d + 1));
                    queue.push_back((w, d + 1));
                }
            }
        }
        Ok(out)
    }

    /// The `r`-hop neighbourhood of `v`, always including `v`, sorted by id.
    pub fn neighbourhood(&self, v: NodeId, r: usize) -> Result<Vec<NodeId>> {
        let mut nodes: Vec<NodeId> = self.bfs_within(v, r)?.into_iter().map(|(u, _)| u).collect();
        nodes.sort_unstable();
        Ok(nodes)
    }

    /// Connected components as sorted node lists, ordered by their smallest id.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let n = self.num_nodes();
        let mut comp = vec![usize::MAX; n];
        let mut out: Vec<Vec<NodeId>> = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![NodeId::from(s)];
            comp[s] = id;
            let mut head = 0;
            while head < members.len() {
                let u = members[head];
                head += 1;
                for &w in self.neighbours(u) {
                    if comp[w.index()] == usize::MAX {
                        comp[w.index()] = id;
                        members.push(w);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    /// Induced subgraph on `nodes` (any order, no duplicates). Ids are
    /// re-densified in ascending order of the original ids; the returned
    /// table maps every old id to its new id, if kept.
    pub fn induced(&self, nodes: &[NodeId]) -> Result<(SocialGraph, Vec<Option<NodeId>>)> {
        let mut keep: Vec<NodeId> = nodes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut map = vec![None; self.num_nodes()];
        for (new, &old) in keep.iter().enumerate() {
            self.check(old)?;
            map[old.index()] = Some(NodeId::from(new));
        }
        let kinds = keep.iter().map(|&v| self.kind(v)).collect();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for &v in &keep {
            if let Some(x) = self.features(v) {
                features.extend_from_slice(x);
                labels.push(self.label(v).unwrap_or(0));
            }
        }
        let edges: Vec<(NodeId, NodeId)> = self
            .edges()
            .filter_map(|(u, v)| Some((map[u.index()]?, map[v.index()]?)))
            .collect();
        let g = SocialGraph::new(kinds, edges, features, self.feature_dim, labels, self.num_classes)?;
        Ok((g, map))
    }

    /// Induced subgraph on the largest connected component. Ties on size go
    /// to the component holding the smallest node id.
    pub fn largest_connected_component(&self) -> Result<(SocialGraph, Vec<Option<NodeId>>)> {
        if self.num_nodes() == 0 {
            return Err(Error::Input("empty graph".into()));
        }
        let comps = self.components();
        // components are ordered by minimum id, so the first maximum wins ties
        let mut best = 0;
        for (i, c) in comps.iter().enumerate() {
            if c.len() > comps[best].len() {
                best = i;
            }
        }
        self.induced(&comps[best])
    }
}

/// One fold of a document-level cross-validation split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_docs: Vec<NodeId>,
    pub val_docs: Vec<NodeId>,
}

/// Stratified `k`-fold split over documents. Users are never partitioned.
///
/// Each class is shuffled and dealt round-robin, continuing the deal across
/// classes so fold sizes differ by at most one.
pub fn stratified_kfold(g: &SocialGraph, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut by_class: Vec<Vec<NodeId>> = vec![Vec::new(); g.num_classes()];
    for &d in g.docs() {
        by_class[g.label(d).unwrap_or(0)].push(d);
    }
    for (c, docs) in by_class.iter().enumerate() {
        if docs.len() < k {
            return Err(Error::Config(format!(
                "class {c} has {} documents, fewer than k = {k} folds",
                docs.len()
            )));
        }
    }
    let mut rng = rng::stream(seed, rng::key(0x4b46, 0, 0));
    let mut val: Vec<Vec<NodeId>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for docs in &mut by_class {
        docs.shuffle(&mut rng);
        for &d in docs.iter() {
            val[cursor % k].push(d);
            cursor += 1;
        }
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(fold_id, mut val_docs)| {
            val_docs.sort_unstable();
            let mut is_val = vec![false; g.num_nodes()];
            for d in &val_docs {
                is_val[d.index()] = true;
            }
            let train_docs = g.docs().iter().copied().filter(|d| !is_val[d.index()]).collect();
            FoldSplit {
                fold_id,
                train_docs,
                val_docs,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(i: u32) -> NodeId {
        NodeId(i)
    }

    /// u0 - d1 - u2
    fn path() -> SocialGraph {
        SocialGraph::new(
            vec![NodeKind::User, NodeKind::Document, NodeKind::User],
            [(id(0), id(1)), (id(1), id(2))],
            vec![0.5, 1.5],
            2,
            vec![1],
            2,
        )
        .unwrap()
    }

    #[test]
    fn neighbourhood_radius_zero_is_self() {
        let g = path();
        for v in 0..3 {
            assert_eq!(g.neighbourhood(id(v), 0).unwrap(), vec![id(v)]);
        }
    }

    #[test]
    fn neighbourhood_on_path() {
        let g = path();
        assert_eq!(g.neighbourhood(id(1), 1).unwrap(), vec![id(0), id(1), id(2)]);
        assert_eq!(g.neighbourhood(id(0), 2).unwrap(), vec![id(0), id(1), id(2)]);
        assert_eq!(g.neighbourhood(id(0), 1).unwrap(), vec![id(0), id(1)]);
    }

    #[test]
    fn unknown_node_is_input_error() {
        let g = path();
        assert!(matches!(g.neighbourhood(id(9), 1), Err(Error::Input(_))));
    }

    #[test]
    fn rejects_doc_doc_edges_and_isolated_docs() {
        let kinds = vec![NodeKind::Document, NodeKind::Document, NodeKind::User];
        let r = SocialGraph::new(kinds.clone(), [(id(0), id(1))], vec![0.0; 2], 1, vec![0, 1], 2);
        assert!(matches!(r, Err(Error::Input(_))));
        let r = SocialGraph::new(kinds, [(id(0), id(2))], vec![0.0; 2], 1, vec![0, 1], 2);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn edges_are_symmetrised_and_deduplicated() {
        let g = SocialGraph::new(
            vec![NodeKind::User, NodeKind::Document, NodeKind::User],
            [(id(1), id(0)), (id(0), id(1)), (id(0), id(1)), (id(2), id(1)), (id(2), id(2))],
            vec![0.0],
            1,
            vec![0],
            2,
        )
        .unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.neighbours(id(1)), &[id(0), id(2)]);
        assert_eq!(g.neighbours(id(2)), &[id(1)]);
    }

    fn two_components(sizes: (usize, usize)) -> SocialGraph {
        // each component: a user chain with one document hanging off the first user
        let mut kinds = Vec::new();
        let mut edges = Vec::new();
        let mut labels = Vec::new();
        for &size in &[sizes.0, sizes.1] {
            let base = kinds.len() as u32;
            kinds.push(NodeKind::Document);
            labels.push(0);
            for j in 1..size as u32 {
                kinds.push(NodeKind::User);
                edges.push((id(base + j - 1), id(base + j)));
            }
        }
        let n_docs = labels.len();
        SocialGraph::new(kinds, edges, vec![0.0; n_docs], 1, labels, 2).unwrap()
    }

    #[test]
    fn lcc_connected_graph_is_identity() {
        let g = path();
        let (h, map) = g.largest_connected_component().unwrap();
        assert_eq!(h.num_nodes(), 3);
        assert_eq!(h.num_edges(), 2);
        assert_eq!(map, vec![Some(id(0)), Some(id(1)), Some(id(2))]);
    }

    #[test]
    fn lcc_picks_majority_component() {
        let g = two_components((3, 5));
        let (h, map) = g.largest_connected_component().unwrap();
        assert_eq!(h.num_nodes(), 5);
        assert!(map[..3].iter().all(Option::is_none));
        assert_eq!(map[3], Some(id(0)));
    }

    #[test]
    fn lcc_tie_goes_to_smallest_id() {
        let g = two_components((4, 4));
        let (_, map) = g.largest_connected_component().unwrap();
        assert_eq!(map[0], Some(id(0)));
        assert!(map[4..].iter().all(Option::is_none));
    }

    fn balanced(n_per_class: usize, classes: usize) -> SocialGraph {
        let mut kinds = vec![NodeKind::User];
        let mut edges = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per_class {
                edges.push((id(0), id(kinds.len() as u32)));
                kinds.push(NodeKind::Document);
                labels.push(c);
            }
        }
        let n = labels.len();
        SocialGraph::new(kinds, edges, vec![0.0; n], 1, labels, classes).unwrap()
    }

    #[test]
    fn kfold_perfectly_divisible() {
        let g = balanced(5, 2);
        let folds = stratified_kfold(&g, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            let mut counts = [0; 2];
            for &d in &f.val_docs {
                counts[g.label(d).unwrap()] += 1;
            }
            assert_eq!(counts, [1, 1]);
            assert_eq!(f.train_docs.len(), 8);
        }
    }

    #[test]
    fn kfold_is_deterministic_and_rejects_tiny_classes() {
        let g = balanced(7, 3);
        assert_eq!(stratified_kfold(&g, 5, 11).unwrap(), stratified_kfold(&g, 5, 11).unwrap());
        let g = balanced(4, 2);
        assert!(matches!(stratified_kfold(&g, 5, 0), Err(Error::Config(_))));
    }
}
