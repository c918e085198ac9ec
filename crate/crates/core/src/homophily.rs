//! Homophily of document labels over the doc/user structure.
//!
//! Documents are never adjacent, so neighbourhood statistics look at the
//! documents within `r` hops (default 2: doc-user-doc). A node's own label
//! never counts towards its neighbourhood.

use std::collections::{HashSet, VecDeque};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{NodeId, SocialGraph};
use crate::sampler::SubgraphView;

/// Adjacency and labels of a view, in local indices.
pub struct LabelledView {
    offsets: Vec<usize>,
    adjacency: Vec<u32>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
}

impl LabelledView {
    /// Every document of the view carries its label.
    pub fn new(g: &SocialGraph, view: &SubgraphView) -> Self {
        Self::with_labels(g, view, |v| g.label(v))
    }

    /// Labels are restricted to the view's flagged targets; other nodes are
    /// treated as unlabelled and omitted.
    pub fn targets_only(g: &SocialGraph, view: &SubgraphView) -> Self {
        Self::with_labels(g, view, |v| view.local(v).filter(|&i| view.targets[i]).and(g.label(v)))
    }

    /// The whole graph.
    pub fn whole(g: &SocialGraph) -> Self {
        let nodes = (0..g.num_nodes()).map(NodeId::from).collect();
        Self::new(g, &SubgraphView::induced(g, nodes))
    }

    fn with_labels(g: &SocialGraph, view: &SubgraphView, label: impl Fn(NodeId) -> Option<usize>) -> Self {
        let n = view.len();
        let mut degree = vec![0usize; n];
        for &(a, b) in &view.edges {
            degree[a as usize] += 1;
            degree[b as usize] += 1;
        }
        let mut offsets = vec![0; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut fill = offsets[..n].to_vec();
        let mut adjacency = vec![0u32; offsets[n]];
        for &(a, b) in &view.edges {
            adjacency[fill[a as usize]] = b;
            fill[a as usize] += 1;
            adjacency[fill[b as usize]] = a;
            fill[b as usize] += 1;
        }
        Self {
            offsets,
            adjacency,
            labels: view.nodes.iter().map(|&v| label(v)).collect(),
            num_classes: g.num_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    fn neighbours(&self, i: usize) -> &[u32] {
        &self.adjacency[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Class prevalence among labelled nodes.
    pub fn prevalence(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        for y in self.labels.iter().flatten() {
            counts[*y] += 1;
        }
        let total: usize = counts.iter().sum();
        counts
            .into_iter()
            .map(|c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect()
    }

    /// `(same-label, total)` labelled nodes within `r` hops of `i`, excluding `i`.
    pub fn neighbour_counts(&self, i: usize, r: usize) -> (usize, usize) {
        let own = self.labels[i];
        let mut dist = vec![usize::MAX; self.len()];
        dist[i] = 0;
        let mut queue = VecDeque::from([i]);
        let (mut same, mut total) = (0, 0);
        while let Some(v) = queue.pop_front() {
            if dist[v] == r {
                continue;
            }
            for &u in self.neighbours(v) {
                let u = u as usize;
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                    if let Some(y) = self.labels[u] {
                        total += 1;
                        same += (Some(y) == own) as usize;
                    }
                }
            }
        }
        (same, total)
    }
}

/// Share of same-label documents among the labelled documents within `r`
/// hops of `i`; `None` when `i` is unlabelled or has no labelled neighbours.
pub fn neigh_homophily(view: &LabelledView, i: usize, r: usize) -> Option<f64> {
    view.label(i)?;
    match view.neighbour_counts(i, r) {
        (_, 0) => None,
        (same, total) => Some(same as f64 / total as f64),
    }
}

/// Mean normalised excess `(h(v) - p_c) / (1 - p_c)` over class-`c`
/// documents with a defined neighbourhood. Also returns the number of
/// class-`c` documents skipped for an empty neighbourhood.
pub fn relative_excess(view: &LabelledView, c: usize, r: usize) -> (Option<f64>, usize) {
    let p = view.prevalence()[c];
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for i in 0..view.len() {
        if view.label(i) != Some(c) {
            continue;
        }
        match neigh_homophily(view, i, r) {
            Some(h) => {
                sum += h;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    if n == 0 || p >= 1.0 {
        return (None, skipped);
    }
    (Some((sum / n as f64 - p) / (1.0 - p)), skipped)
}

/// Class-insensitive excess homophily; `None` with fewer than two classes.
pub fn class_insensitive_excess(view: &LabelledView, r: usize) -> Option<f64> {
    let classes = view.num_classes;
    if classes < 2 {
        return None;
    }
    let p = view.prevalence();
    let mut same = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for i in 0..view.len() {
        if let Some(y) = view.label(i) {
            let (s, t) = view.neighbour_counts(i, r);
            same[y] += s;
            total[y] += t;
        }
    }
    let sum: f64 = (0..classes)
        .filter(|&c| total[c] > 0)
        .map(|c| (same[c] as f64 / total[c] as f64 - p[c]).max(0.0))
        .sum();
    Some(sum / (classes - 1) as f64)
}

/// Share of same-label pairs among distinct document pairs sharing a user.
pub fn edge_homophily(g: &SocialGraph) -> Option<f64> {
    let mut pairs = HashSet::new();
    for u in g.users() {
        let docs: Vec<NodeId> = g.neighbours(u).iter().copied().filter(|&v| g.is_doc(v)).collect();
        for (i, &a) in docs.iter().enumerate() {
            for &b in &docs[i + 1..] {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
    }
    if pairs.is_empty() {
        return None;
    }
    let same = pairs.iter().filter(|(a, b)| g.label(*a) == g.label(*b)).count();
    Some(same as f64 / pairs.len() as f64)
}

/// One exported relative-excess value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessRecord {
    pub view: u64,
    pub side: String,
    pub class: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomophilyReport {
    pub radius: usize,
    pub edge_homophily: Option<f64>,
    pub class_insensitive: Option<f64>,
    pub prevalence: Vec<f64>,
    /// Mean relative excess per class over views, by side.
    pub mean_excess: Vec<SideSummary>,
    /// Documents skipped for an empty document neighbourhood.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub side: String,
    pub views: usize,
    pub per_class: Vec<Option<f64>>,
}

/// Graph-level statistics plus per-view, per-class relative excess for
/// every `(view id, side, labelled view)`.
pub fn homophily_profile(
    g: &SocialGraph,
    views: &[(u64, String, LabelledView)],
    r: usize,
) -> (HomophilyReport, Vec<ExcessRecord>) {
    let whole = LabelledView::whole(g);
    let c = g.num_classes();
    let per_view: Vec<(Vec<ExcessRecord>, usize)> = views
        .par_iter()
        .map(|(id, side, view)| {
            let mut out = Vec::new();
            let mut skipped = 0;
            for class in 0..c {
                let (value, s) = relative_excess(view, class, r);
                skipped += s;
                if let Some(value) = value {
                    out.push(ExcessRecord {
                        view: *id,
                        side: side.clone(),
                        class,
                        value,
                    });
                }
            }
            (out, skipped)
        })
        .collect();
    let skipped = per_view.iter().map(|(_, s)| s).sum();
    let records: Vec<ExcessRecord> = per_view.into_iter().flat_map(|(r, _)| r).collect();

    let mut sides: Vec<String> = views.iter().map(|(_, s, _)| s.clone()).collect();
    sides.sort();
    sides.dedup();
    let mean_excess = sides
        .into_iter()
        .map(|side| {
            let per_class = (0..c)
                .map(|class| {
                    let vals: Vec<f64> = records
                        .iter()
                        .filter(|e| e.side == side && e.class == class)
                        .map(|e| e.value)
                        .collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            SideSummary {
                views: views.iter().filter(|(_, s, _)| *s == side).count(),
                side,
                per_class,
            }
        })
        .collect();
    let report = HomophilyReport {
        radius: r,
        edge_homophily: edge_homophily(g),
        class_insensitive: class_insensitive_excess(&whole, r),
        prevalence: whole.prevalence(),
        mean_excess,
        skipped,
    };
    (report, records)
}

/// Writes records as JSON lines.
pub fn write_records<W: Write>(out: &mut W, records: &[ExcessRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
