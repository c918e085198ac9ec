//! Few-shot, locality-preserving support subgraphs and query graphs.
//!
//! A support subgraph is grown around an anchor user: the smallest radius
//! whose neighbourhood holds `k_shot` labelled documents of every class is
//! located first, then random walks rooted at documents (classes taken in
//! turn) are unioned until the node budget is reached. Walks never leave
//! that neighbourhood. Per training window, `k_shot` documents per class
//! are unmasked in each view, favouring documents that occur in few views.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind, SocialGraph};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k_shot: usize,
    /// Maximum support-graph node count before the last walk is added.
    pub budget: usize,
    pub walk_length: usize,
    pub r_min: usize,
    pub r_max: usize,
    /// Consecutive walks without a new node, per class, before growth stops.
    pub stall_factor: usize,
    pub max_anchor_attempts: usize,
    /// Views per unmasking window; inverse-frequency counts are taken over it.
    pub window: usize,
    /// Query documents per class for meta-training episodes.
    pub query_per_class: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_shot: 4,
            budget: 2048,
            walk_length: 5,
            r_min: 2,
            r_max: 5,
            stall_factor: 50,
            max_anchor_attempts: 1000,
            window: 64,
            query_per_class: 16,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.k_shot == 0 {
            return Err(Error::Config("k_shot must be >= 1".into()));
        }
        if self.budget <= self.k_shot * num_classes {
            return Err(Error::Config(format!(
                "budget {} must exceed k_shot x classes = {}",
                self.budget,
                self.k_shot * num_classes
            )));
        }
        if self.walk_length == 0 {
            return Err(Error::Config("walk_length must be >= 1".into()));
        }
        if self.r_min > self.r_max {
            return Err(Error::Config(format!("r_min {} > r_max {}", self.r_min, self.r_max)));
        }
        if self.window == 0 || self.max_anchor_attempts == 0 || self.stall_factor == 0 {
            return Err(Error::Config("window, stall_factor and max_anchor_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Induced subgraph of a parent graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphView {
    /// Parent ids, ascending. Local index = position.
    pub nodes: Vec<NodeId>,
    /// Induced undirected edges `(i, j)`, `i < j`, in local indices.
    pub edges: Vec<(u32, u32)>,
    /// Whether each node's label is visible (support) or scored (query).
    pub targets: Vec<bool>,
}

impl SubgraphView {
    pub fn induced(g: &SocialGraph, mut nodes: Vec<NodeId>) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        let mut local = HashMap::with_capacity(nodes.len());
        for (i, &v) in nodes.iter().enumerate() {
            local.insert(v, i as u32);
        }
        let mut edges = Vec::new();
        for (i, &v) in nodes.iter().enumerate() {
            for u in g.neighbours(v) {
                if let Some(&j) = local.get(u) {
                    if (i as u32) < j {
                        edges.push((i as u32, j));
                    }
                }
            }
        }
        let targets = vec![false; nodes.len()];
        Self { nodes, edges, targets }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn local(&self, v: NodeId) -> Option<usize> {
        self.nodes.binary_search(&v).ok()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.local(v).is_some()
    }

    /// Parent ids of the flagged nodes.
    pub fn target_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .zip(&self.targets)
            .filter(|(_, &t)| t)
            .map(|(&v, _)| v)
            .collect()
    }

    fn set_targets(&mut self, targets: &[NodeId]) {
        self.targets.iter_mut().for_each(|t| *t = false);
        for &v in targets {
            if let Some(i) = self.local(v) {
                self.targets[i] = true;
            }
        }
    }
}

/// A support subgraph before label unmasking.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSample {
    pub view: SubgraphView,
    pub anchor: NodeId,
    pub radius: usize,
    /// Labelled (pool) documents inside the view, per class, ascending.
    pub candidates: Vec<Vec<NodeId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    /// No radius up to `r_max` holds `k_shot` documents of every class.
    NoRadius,
    /// Growth stalled before the view became a valid k-shot graph.
    Stall,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sampled {
    Accepted(SupportSample),
    Rejected(Rejection),
}

/// Uniform random walk of at most `length` steps. Steps only go to
/// neighbours for which `allowed` is true (all neighbours when `None`); a
/// walk with no admissible next node stops early.
pub fn random_walk<R: Rng + ?Sized>(
    g: &SocialGraph,
    start: NodeId,
    length: usize,
    allowed: Option<&[bool]>,
    rng: &mut R,
) -> Vec<NodeId> {
    let mut path = Vec::with_capacity(length + 1);
    path.push(start);
    let mut cur = start;
    let mut options = Vec::new();
    for _ in 0..length {
        options.clear();
        options.extend(
            g.neighbours(cur)
                .iter()
                .copied()
                .filter(|u| allowed.is_none_or(|a| a[u.index()])),
        );
        let Some(&next) = options.choose(rng) else { break };
        path.push(next);
        cur = next;
    }
    path
}

/// Grows one support subgraph around `anchor`. `pool[v]` marks documents
/// whose labels may be used.
pub fn sample_support<R: Rng + ?Sized>(
    g: &SocialGraph,
    cfg: &SamplerConfig,
    anchor: NodeId,
    pool: &[bool],
    rng: &mut R,
) -> Result<Sampled> {
    if !g.contains(anchor) || g.kind(anchor) != NodeKind::User {
        return Err(Error::Input(format!("anchor {} is not a user node", anchor.0)));
    }
    let c = g.num_classes();
    let reach = g.bfs_within(anchor, cfg.r_max)?;

    // smallest radius whose neighbourhood holds k labelled documents per class
    let mut chosen = None;
    for r in cfg.r_min..=cfg.r_max {
        let mut counts = vec![0usize; c];
        for &(v, d) in &reach {
            if d <= r && pool[v.index()] {
                if let Some(y) = g.label(v) {
                    counts[y] += 1;
                }
            }
        }
        if counts.iter().all(|&n| n >= cfg.k_shot) {
            chosen = Some(r);
            break;
        }
    }
    let Some(radius) = chosen else {
        return Ok(Sampled::Rejected(Rejection::NoRadius));
    };

    let mut allowed = vec![false; g.num_nodes()];
    let mut roots: Vec<Vec<NodeId>> = vec![Vec::new(); c];
    let mut region = 0;
    for &(v, d) in &reach {
        if d <= radius {
            allowed[v.index()] = true;
            region += 1;
            if pool[v.index()] {
                if let Some(y) = g.label(v) {
                    roots[y].push(v);
                }
            }
        }
    }

    let mut in_view = vec![false; g.num_nodes()];
    let mut nodes = Vec::new();
    let stall_limit = cfg.stall_factor * c;
    let mut stalled = 0;
    let mut turn = 0;
    while nodes.len() < cfg.budget && nodes.len() < region && stalled < stall_limit {
        let y = turn % c;
        turn += 1;
        let &root = roots[y].choose(rng).expect("radius check guarantees roots");
        let before = nodes.len();
        for v in random_walk(g, root, cfg.walk_length, Some(&allowed), rng) {
            if !in_view[v.index()] {
                in_view[v.index()] = true;
                nodes.push(v);
            }
        }
        stalled = if nodes.len() == before { stalled + 1 } else { 0 };
    }

    let mut candidates: Vec<Vec<NodeId>> = vec![Vec::new(); c];
    for &v in &nodes {
        if pool[v.index()] {
            if let Some(y) = g.label(v) {
                candidates[y].push(v);
            }
        }
    }
    if candidates.iter().any(|docs| docs.len() < cfg.k_shot) {
        return Ok(Sampled::Rejected(Rejection::Stall));
    }
    for docs in &mut candidates {
        docs.sort_unstable();
    }
    Ok(Sampled::Accepted(SupportSample {
        view: SubgraphView::induced(g, nodes),
        anchor,
        radius,
        candidates,
    }))
}

/// Picks `k` documents per class in every sample, without replacement,
/// with weight `1 / count(v)` where `count(v)` is the number of samples in
/// `samples` containing `v`.
pub fn unmask_labels<R: Rng + ?Sized>(
    samples: &[SupportSample],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Vec<NodeId>>>> {
    let mut count: HashMap<NodeId, usize> = HashMap::new();
    for s in samples {
        for docs in &s.candidates {
            for &v in docs {
                *count.entry(v).or_default() += 1;
            }
        }
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.candidates
                .iter()
                .enumerate()
                .map(|(y, docs)| {
                    if docs.len() < k {
                        return Err(Error::Input(format!(
                            "view {i} has {} documents of class {y}, needs {k}",
                            docs.len()
                        )));
                    }
                    if docs.len() == k {
                        return Ok(docs.clone());
                    }
                    let mut picked: Vec<NodeId> = docs
                        .choose_multiple_weighted(rng, k, |v| 1.0 / count[v] as f64)
                        .map_err(|e| Error::Input(e.to_string()))?
                        .copied()
                        .collect();
                    picked.sort_unstable();
                    Ok(picked)
                })
                .collect()
        })
        .collect()
}

/// Union of the `r`-hop neighbourhoods of `n_docs` documents drawn from
/// `pool` without replacement; `n_docs = 0` (or more than the pool) takes
/// the whole pool. The drawn documents are the view's targets.
pub fn sample_query<R: Rng + ?Sized>(
    g: &SocialGraph,
    pool: &[NodeId],
    n_docs: usize,
    r: usize,
    rng: &mut R,
) -> Result<SubgraphView> {
    if pool.is_empty() {
        return Err(Error::Input("empty query pool".into()));
    }
    let chosen: Vec<NodeId> = if n_docs == 0 || n_docs >= pool.len() {
        pool.to_vec()
    } else {
        pool.choose_multiple(rng, n_docs).copied().collect()
    };
    query_view(g, &chosen, r)
}

/// Query view over fixed target documents.
pub fn query_view(g: &SocialGraph, targets: &[NodeId], r: usize) -> Result<SubgraphView> {
    let mut seen = vec![false; g.num_nodes()];
    let mut nodes = Vec::new();
    for &d in targets {
        if !g.is_doc(d) {
            return Err(Error::Input(format!("query target {} is not a document", d.0)));
        }
        for (v, _) in g.bfs_within(d, r)? {
            if !seen[v.index()] {
                seen[v.index()] = true;
                nodes.push(v);
            }
        }
    }
    let mut view = SubgraphView::induced(g, nodes);
    view.set_targets(targets);
    Ok(view)
}

/// One meta-learning episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub index: u64,
    pub anchor: NodeId,
    pub radius: usize,
    /// Support subgraph; `targets` marks the unmasked documents.
    pub support: SubgraphView,
    /// Unmasked documents per class (exactly `k_shot` each).
    pub unmasked: Vec<Vec<NodeId>>,
    /// Query graph; `targets` marks labelled query documents.
    pub query: Arc<SubgraphView>,
}

impl Episode {
    /// `(local index, class)` for every unmasked support document.
    pub fn support_targets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (y, docs) in self.unmasked.iter().enumerate() {
            for &v in docs {
                out.push((self.support.local(v).expect("unmasked docs lie in the view"), y));
            }
        }
        out.sort_unstable();
        out
    }

    /// Local query indices that count towards metrics: query targets that
    /// are not part of the support subgraph.
    pub fn scored_query(&self) -> Vec<usize> {
        self.query
            .nodes
            .iter()
            .enumerate()
            .filter(|&(i, v)| self.query.targets[i] && !self.support.contains(*v))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            episode: self.index,
            anchor: self.anchor,
            radius: self.radius,
            support_nodes: self.support.nodes.clone(),
            unmasked: self.unmasked.clone(),
            query_targets: self.query.target_nodes(),
        }
    }
}

/// One line of an episode manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub anchor: NodeId,
    pub radius: usize,
    pub support_nodes: Vec<NodeId>,
    pub unmasked: Vec<Vec<NodeId>>,
    pub query_targets: Vec<NodeId>,
}

/// How the query graph of each episode is formed.
#[derive(Clone, Debug)]
pub enum QueryPlan {
    /// `per_class` documents of each class drawn from `pool`, excluding the
    /// episode's unmasked support documents, with their 2-hop neighbourhoods.
    Balanced { pool: Vec<NodeId>, per_class: usize },
    /// One query graph shared by every episode (evaluation).
    Shared(Arc<SubgraphView>),
}

const TAG_SUPPORT: u64 = 0x5u64;
const TAG_UNMASK: u64 = 0x6u64;
const TAG_QUERY: u64 = 0x7u64;

/// Episodes `first .. first + n`, reproducible from `(cfg.seed, index)`.
///
/// Unmasking windows are aligned to multiples of `cfg.window`, so the
/// same episode index always yields the same episode regardless of how the
/// range is split into calls, as long as calls cover whole windows.
pub fn episode_stream(
    g: &SocialGraph,
    support_pool: &[NodeId],
    query: &QueryPlan,
    cfg: &SamplerConfig,
    first: u64,
    n: usize,
) -> Result<Vec<Episode>> {
    cfg.validate(g.num_classes())?;
    let users: Vec<NodeId> = g.users().collect();
    if users.is_empty() {
        return Err(Error::Config("graph has no user nodes to anchor on".into()));
    }
    let mut pool = vec![false; g.num_nodes()];
    for &d in support_pool {
        pool[d.index()] = true;
    }

    let samples: Vec<SupportSample> = (first..first + n as u64)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..cfg.max_anchor_attempts {
                let mut rng = rng::stream(cfg.seed, rng::key(TAG_SUPPORT, i, attempt as u64));
                let &anchor = users.choose(&mut rng).expect("non-empty");
                if let Sampled::Accepted(s) = sample_support(g, cfg, anchor, &pool, &mut rng)? {
                    return Ok(s);
                }
            }
            Err(Error::Config(format!(
                "no valid {}-shot support graph after {} anchors (episode {i}); graph too sparse",
                cfg.k_shot, cfg.max_anchor_attempts
            )))
        })
        .collect::<Result<_>>()?;

    let mut unmasked = Vec::with_capacity(n);
    let mut offset = 0;
    while offset < samples.len() {
        let index = first + offset as u64;
        let window = index / cfg.window as u64;
        let end = (((window + 1) * cfg.window as u64 - first) as usize).min(samples.len());
        let mut rng = rng::stream(cfg.seed, rng::key(TAG_UNMASK, window, index));
        unmasked.extend(unmask_labels(&samples[offset..end], cfg.k_shot, &mut rng)?);
        offset = end;
    }

    samples
        .into_par_iter()
        .zip(unmasked)
        .enumerate()
        .map(|(j, (s, picked))| {
            let index = first + j as u64;
            let mut support = s.view;
            support.set_targets(&picked.concat());
            let query = match query {
                QueryPlan::Shared(view) => Arc::clone(view),
                QueryPlan::Balanced { pool, per_class } => {
                    let mut rng = rng::stream(cfg.seed, rng::key(TAG_QUERY, index, 0));
                    Arc::new(balanced_query(g, pool, *per_class, &picked.concat(), &mut rng)?)
                }
            };
            Ok(Episode {
                index,
                anchor: s.anchor,
                radius: s.radius,
                support,
                unmasked: picked,
                query,
            })
        })
        .collect()
}

fn balanced_query<R: Rng + ?Sized>(
    g: &SocialGraph,
    pool: &[NodeId],
    per_class: usize,
    exclude: &[NodeId],
    rng: &mut R,
) -> Result<SubgraphView> {
    let mut by_class: Vec<Vec<NodeId>> = vec![Vec::new(); g.num_classes()];
    for &d in pool {
        if !exclude.contains(&d) {
            if let Some(y) = g.label(d) {
                by_class[y].push(d);
            }
        }
    }
    let mut targets = Vec::new();
    for docs in &mut by_class {
        docs.shuffle(rng);
        targets.extend(docs.iter().take(per_class.max(1)));
    }
    if targets.is_empty() {
        return Err(Error::Input("query pool has no labelled documents".into()));
    }
    query_view(g, &targets, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(i: u32) -> NodeId {
        NodeId(i)
    }

    fn graph(kinds: &[NodeKind], edges: &[(u32, u32)], labels: &[usize]) -> SocialGraph {
        SocialGraph::new(
            kinds.to_vec(),
            edges.iter().map(|&(a, b)| (id(a), id(b))),
            vec![0.0; labels.len()],
            1,
            labels.to_vec(),
            2,
        )
        .unwrap()
    }

    use NodeKind::{Document as D, User as U};

    #[test]
    fn walk_of_length_zero_and_forced_step() {
        let g = graph(&[U, D], &[(0, 1)], &[0]);
        let mut rng = rng::stream(0, 0);
        assert_eq!(random_walk(&g, id(1), 0, None, &mut rng), vec![id(1)]);
        assert_eq!(random_walk(&g, id(1), 1, None, &mut rng), vec![id(1), id(0)]);
    }

    #[test]
    fn walk_stops_without_admissible_neighbour() {
        let g = graph(&[U, D, U], &[(0, 1), (1, 2)], &[0]);
        let allowed = [false, true, false];
        let mut rng = rng::stream(0, 0);
        assert_eq!(random_walk(&g, id(1), 5, Some(&allowed), &mut rng), vec![id(1)]);
    }

    #[test]
    fn star_with_one_class_is_rejected() {
        // one user, three documents of class 0 only
        let g = graph(&[U, D, D, D], &[(0, 1), (0, 2), (0, 3)], &[0, 0, 0]);
        let cfg = SamplerConfig {
            k_shot: 1,
            ..Default::default()
        };
        let pool = vec![true; 4];
        let mut rng = rng::stream(0, 0);
        let out = sample_support(&g, &cfg, id(0), &pool, &mut rng).unwrap();
        assert_eq!(out, Sampled::Rejected(Rejection::NoRadius));
    }

    #[test]
    fn anchor_must_be_user() {
        let g = graph(&[U, D], &[(0, 1)], &[0]);
        let mut rng = rng::stream(0, 0);
        let r = sample_support(&g, &SamplerConfig::default(), id(1), &[true, true], &mut rng);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn smallest_radius_is_chosen() {
        // u0 - {d1 (0), d2 (1)} and a far branch u0 - u3 - u4 - d5
        let g = graph(
            &[U, D, D, U, U, D],
            &[(0, 1), (0, 2), (0, 3), (3, 4), (4, 5)],
            &[0, 1, 1],
        );
        let cfg = SamplerConfig {
            k_shot: 1,
            budget: 100,
            ..Default::default()
        };
        let pool = vec![true; 6];
        let mut rng = rng::stream(3, 0);
        let Sampled::Accepted(s) = sample_support(&g, &cfg, id(0), &pool, &mut rng).unwrap() else {
            panic!("expected a support graph");
        };
        assert_eq!(s.radius, 2);
        assert!(!s.view.contains(id(5)));
    }

    fn sample(candidates: Vec<Vec<NodeId>>) -> SupportSample {
        SupportSample {
            view: SubgraphView {
                nodes: vec![],
                edges: vec![],
                targets: vec![],
            },
            anchor: id(0),
            radius: 2,
            candidates,
        }
    }

    #[test]
    fn forced_unmasking_takes_all() {
        let s = sample(vec![vec![id(1), id(2)], vec![id(3), id(4)]]);
        let mut rng = rng::stream(0, 0);
        let picked = unmask_labels(&[s], 2, &mut rng).unwrap();
        assert_eq!(picked[0], vec![vec![id(1), id(2)], vec![id(3), id(4)]]);
    }

    #[test]
    fn unmasking_too_few_is_error() {
        let s = sample(vec![vec![id(1)], vec![id(3), id(4)]]);
        let mut rng = rng::stream(0, 0);
        assert!(matches!(unmask_labels(&[s], 2, &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn query_all_and_clamping() {
        let g = graph(&[U, D, D, D], &[(0, 1), (0, 2), (0, 3)], &[0, 1, 0]);
        let mut rng = rng::stream(0, 0);
        let pool = [id(1), id(2), id(3)];
        let v = sample_query(&g, &pool, 0, 2, &mut rng).unwrap();
        assert_eq!(v.target_nodes(), pool.to_vec());
        let v = sample_query(&g, &pool, 10, 2, &mut rng).unwrap();
        assert_eq!(v.target_nodes().len(), 3);
        let v = sample_query(&g, &pool, 1, 2, &mut rng).unwrap();
        let t = v.target_nodes()[0];
        assert_eq!(v.nodes, g.neighbourhood(t, 2).unwrap());
    }
}
