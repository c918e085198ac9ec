use std::collections::{HashSet, VecDeque};

use commeta::datagen::{generate, SyntheticSpec};
use commeta::graph::{NodeId, SocialGraph};
use commeta::rng;
use commeta::sampler::{
    episode_stream, query_view, random_walk, sample_support, unmask_labels, QueryPlan, Sampled, SamplerConfig,
    SubgraphView, SupportSample,
};
use proptest::prelude::*;

fn graph(seed: u64) -> SocialGraph {
    generate(&SyntheticSpec {
        n_docs: 800,
        n_users: 300,
        n_communities: 12,
        seed,
        ..SyntheticSpec::gossipcop()
    })
    .unwrap()
}

/// Hop distances from `src` by plain breadth-first search.
fn distances(g: &SocialGraph, src: NodeId) -> Vec<Option<usize>> {
    let mut dist = vec![None; g.num_nodes()];
    dist[src.index()] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v.index()].unwrap();
        for &u in g.neighbours(v) {
            if dist[u.index()].is_none() {
                dist[u.index()] = Some(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

fn pool_counts(g: &SocialGraph, dist: &[Option<usize>], pool: &[bool], r: usize) -> Vec<usize> {
    let mut counts = vec![0; g.num_classes()];
    for (i, d) in dist.iter().enumerate() {
        if d.is_some_and(|d| d <= r) && pool[i] {
            if let Some(y) = g.label(NodeId::from(i)) {
                counts[y] += 1;
            }
        }
    }
    counts
}

#[test]
fn episodes_satisfy_invariants() {
    let g = graph(3);
    let cfg = SamplerConfig {
        k_shot: 4,
        budget: 256,
        seed: 11,
        ..Default::default()
    };
    let pool_docs: Vec<NodeId> = g.docs().iter().copied().step_by(2).collect();
    let mut pool = vec![false; g.num_nodes()];
    for d in &pool_docs {
        pool[d.index()] = true;
    }
    let plan = QueryPlan::Balanced {
        pool: pool_docs.clone(),
        per_class: 8,
    };
    let episodes = episode_stream(&g, &pool_docs, &plan, &cfg, 0, 200).unwrap();
    assert_eq!(episodes.len(), 200);
    for ep in &episodes {
        let dist = distances(&g, ep.anchor);
        // locality and budget
        assert!(ep.support.nodes.iter().all(|v| dist[v.index()].is_some_and(|d| d <= ep.radius)));
        assert!(ep.support.len() <= cfg.budget + cfg.walk_length);
        // radius minimality
        let k = cfg.k_shot;
        assert!(pool_counts(&g, &dist, &pool, ep.radius).iter().all(|&n| n >= k));
        for r in cfg.r_min..ep.radius {
            assert!(pool_counts(&g, &dist, &pool, r).iter().any(|&n| n < k));
        }
        // exactly k labelled pool documents per class
        assert_eq!(ep.unmasked.len(), g.num_classes());
        for (y, docs) in ep.unmasked.iter().enumerate() {
            assert_eq!(docs.len(), k);
            assert_eq!(docs.iter().collect::<HashSet<_>>().len(), k);
            for &d in docs {
                assert_eq!(g.label(d), Some(y));
                assert!(pool[d.index()] && ep.support.contains(d));
            }
        }
        let flagged: HashSet<NodeId> = ep.support.target_nodes().into_iter().collect();
        let unmasked: HashSet<NodeId> = ep.unmasked.concat().into_iter().collect();
        assert_eq!(flagged, unmasked);
        // the query never reuses unmasked support labels
        assert!(ep.query.target_nodes().iter().all(|d| !unmasked.contains(d)));
    }
}

#[test]
fn views_are_induced() {
    let g = graph(4);
    let nodes: Vec<NodeId> = (0..g.num_nodes()).step_by(3).map(NodeId::from).collect();
    let view = SubgraphView::induced(&g, nodes.clone());
    let set: HashSet<NodeId> = nodes.iter().copied().collect();
    let mut expected: Vec<(NodeId, NodeId)> = g
        .edges()
        .filter(|(a, b)| set.contains(a) && set.contains(b))
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    expected.sort_unstable();
    let mut got: Vec<(NodeId, NodeId)> = view
        .edges
        .iter()
        .map(|&(i, j)| (view.nodes[i as usize], view.nodes[j as usize]))
        .collect();
    got.sort_unstable();
    assert_eq!(got, expected);
    assert!(view.nodes.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn query_view_covers_two_hops() {
    let g = graph(5);
    let targets: Vec<NodeId> = g.docs()[..20].to_vec();
    let view = query_view(&g, &targets, 2).unwrap();
    let mut expected = HashSet::new();
    for &t in &targets {
        for (i, d) in distances(&g, t).iter().enumerate() {
            if d.is_some_and(|d| d <= 2) {
                expected.insert(NodeId::from(i));
            }
        }
    }
    assert_eq!(view.nodes.iter().copied().collect::<HashSet<_>>(), expected);
    assert_eq!(view.target_nodes(), {
        let mut t = targets.clone();
        t.sort_unstable();
        t
    });
}

#[test]
fn stream_is_independent_of_call_split_and_threads() {
    let g = graph(6);
    let cfg = SamplerConfig {
        budget: 128,
        window: 16,
        seed: 2,
        ..Default::default()
    };
    let pool = g.docs().to_vec();
    let plan = QueryPlan::Balanced {
        pool: pool.clone(),
        per_class: 4,
    };
    let whole = episode_stream(&g, &pool, &plan, &cfg, 0, 48).unwrap();
    let mut split = episode_stream(&g, &pool, &plan, &cfg, 0, 16).unwrap();
    split.extend(episode_stream(&g, &pool, &plan, &cfg, 16, 32).unwrap());
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| episode_stream(&g, &pool, &plan, &cfg, 0, 48).unwrap());
    let records = |eps: &[commeta::sampler::Episode]| eps.iter().map(|e| e.record()).collect::<Vec<_>>();
    assert_eq!(records(&whole), records(&split));
    assert_eq!(records(&whole), records(&single));
}

#[test]
fn rare_documents_are_unmasked_more_often() {
    // one document shared by every view, one private document per view
    let shared = NodeId::from(1000);
    let samples: Vec<SupportSample> = (0..20)
        .map(|i| SupportSample {
            view: SubgraphView {
                nodes: vec![],
                edges: vec![],
                targets: vec![],
            },
            anchor: NodeId::from(0),
            radius: 2,
            candidates: vec![vec![shared, NodeId::from(2000 + i)]],
        })
        .collect();
    let mut r = rng::stream(9, 0);
    let mut shared_picks = 0;
    for _ in 0..200 {
        for picked in unmask_labels(&samples, 1, &mut r).unwrap() {
            shared_picks += (picked[0][0] == shared) as usize;
        }
    }
    // weights 1/20 against 1: the shared document wins about 1 in 21 draws
    let rate = shared_picks as f64 / 4000.0;
    assert!((rate - 1.0 / 21.0).abs() < 0.015, "{rate}");
}

#[test]
fn anchors_must_be_users() {
    let g = graph(7);
    let pool = vec![true; g.num_nodes()];
    let mut r = rng::stream(0, 0);
    assert!(sample_support(&g, &SamplerConfig::default(), g.docs()[0], &pool, &mut r).is_err());
}

#[test]
fn sparse_pool_exhausts_anchor_attempts() {
    let g = graph(8);
    let cfg = SamplerConfig {
        k_shot: 50,
        max_anchor_attempts: 5,
        budget: 400,
        ..Default::default()
    };
    let pool: Vec<NodeId> = g.docs()[..40].to_vec();
    let plan = QueryPlan::Balanced {
        pool: pool.clone(),
        per_class: 1,
    };
    assert!(matches!(
        episode_stream(&g, &pool, &plan, &cfg, 0, 1),
        Err(commeta::Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn walks_follow_edges(seed in 0u64..1000, start in 0usize..1100, len in 0usize..12) {
        let g = graph(1);
        let start = NodeId::from(start % g.num_nodes());
        let mut r = rng::stream(seed, 0);
        let path = random_walk(&g, start, len, None, &mut r);
        prop_assert!(path.len() <= len + 1);
        prop_assert_eq!(path[0], start);
        for w in path.windows(2) {
            prop_assert!(g.neighbours(w[0]).contains(&w[1]));
        }
    }

    #[test]
    fn accepted_supports_are_local(seed in 0u64..500, k in 1usize..4) {
        let g = graph(2);
        let pool = vec![true; g.num_nodes()];
        let cfg = SamplerConfig { k_shot: k, budget: 64, ..Default::default() };
        let mut r = rng::stream(seed, 1);
        let users: Vec<NodeId> = g.users().collect();
        let anchor = users[seed as usize % users.len()];
        if let Sampled::Accepted(s) = sample_support(&g, &cfg, anchor, &pool, &mut r).unwrap() {
            let dist = distances(&g, anchor);
            prop_assert!(s.view.nodes.iter().all(|v| dist[v.index()].is_some_and(|d| d <= s.radius)));
            prop_assert!(s.view.len() <= cfg.budget + cfg.walk_length);
            prop_assert!(s.candidates.iter().all(|c| c.len() >= k));
        }
    }
}
