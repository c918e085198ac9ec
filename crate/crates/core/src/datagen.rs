//! Synthetic doc/user graphs with controllable homophily, degree skew,
//! class imbalance and feature shift.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, Pareto, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind, SocialGraph};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub n_users: usize,
    /// Class proportions; the class count is their length.
    pub proportions: Vec<f64>,
    pub feature_dim: usize,
    /// Distance between class means.
    pub separation: f64,
    /// Probability that a document-user link goes to a community of the
    /// document's class; otherwise the community is drawn by size alone.
    pub homophily: f64,
    /// Pareto shape of user activity.
    pub pareto_alpha: f64,
    pub n_communities: usize,
    /// Documents attach to `1..=max_users_per_doc` users.
    pub max_users_per_doc: usize,
    /// Mean number of user-user edges started per user.
    pub user_edges: f64,
    /// Fraction of user-user edges that may leave the community.
    pub inter_rate: f64,
    /// Symmetric Dirichlet concentration for community sizes.
    pub community_concentration: f64,
    /// Rotation (radians) of feature coordinate pairs (0,1), (2,3), ...
    pub rotation: f64,
    /// Shift of all features along the unit diagonal.
    pub translation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::gossipcop()
    }
}

impl SyntheticSpec {
    fn base(proportions: Vec<f64>) -> Self {
        Self {
            n_docs: 5000,
            n_users: 1000,
            proportions,
            feature_dim: 16,
            separation: 2.0,
            homophily: 0.8,
            pareto_alpha: 1.5,
            n_communities: 40,
            max_users_per_doc: 3,
            user_edges: 2.0,
            inter_rate: 0.1,
            community_concentration: 5.0,
            rotation: 0.0,
            translation: 0.0,
            seed: 0,
        }
    }

    /// Two classes at 77.12 / 22.88.
    pub fn gossipcop() -> Self {
        Self::base(vec![0.7712, 0.2288])
    }

    /// Two classes at 94.72 / 5.28.
    pub fn coaid() -> Self {
        Self::base(vec![0.9472, 0.0528])
    }

    /// Three classes at 11.97 / 19.43 / 68.60.
    pub fn hate_speech() -> Self {
        Self::base(vec![0.1197, 0.1943, 0.6860])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "gossipcop" => Some(Self::gossipcop()),
            "coaid" => Some(Self::coaid()),
            "hate_speech" => Some(Self::hate_speech()),
            _ => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let fail = |m: String| Err(Error::Config(m));
        if c < 2 {
            return fail("at least two class proportions are required".into());
        }
        if self.proportions.iter().any(|&p| !(p > 0.0)) {
            return fail("class proportions must be positive".into());
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return fail(format!("class proportions sum to {total}, not 1"));
        }
        if self.n_docs < c {
            return fail(format!("{} documents cannot cover {c} classes", self.n_docs));
        }
        if self.n_users < self.n_communities || self.n_communities < c {
            return fail(format!(
                "need classes ({c}) <= communities ({}) <= users ({})",
                self.n_communities, self.n_users
            ));
        }
        if self.feature_dim < c {
            return fail(format!("feature_dim {} is below the class count {c}", self.feature_dim));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return fail(format!("homophily {} outside [0, 1]", self.homophily));
        }
        if !(0.0..=1.0).contains(&self.inter_rate) {
            return fail(format!("inter_rate {} outside [0, 1]", self.inter_rate));
        }
        if !(self.pareto_alpha > 1.0) {
            return fail(format!("pareto_alpha {} must exceed 1", self.pareto_alpha));
        }
        if self.max_users_per_doc == 0 || !(self.community_concentration > 0.0) || !(self.user_edges >= 0.0) {
            return fail("max_users_per_doc, community_concentration must be positive, user_edges non-negative".into());
        }
        if !self.separation.is_finite() || !self.rotation.is_finite() || !self.translation.is_finite() {
            return fail("feature parameters must be finite".into());
        }
        Ok(())
    }

    /// Class means after rotation and translation, `num_classes x feature_dim`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let d = self.feature_dim;
        let scale = self.separation / std::f64::consts::SQRT_2;
        let (sin, cos) = self.rotation.sin_cos();
        let shift = self.translation / (d as f64).sqrt();
        (0..self.num_classes())
            .map(|c| {
                let mut mu = vec![0.0; d];
                mu[c] = scale;
                for p in (0..d - 1).step_by(2) {
                    let (a, b) = (mu[p], mu[p + 1]);
                    mu[p] = cos * a - sin * b;
                    mu[p + 1] = sin * a + cos * b;
                }
                mu.iter_mut().for_each(|x| *x += shift);
                mu
            })
            .collect()
    }
}

/// A new domain: feature means rotated by a further `angle` and shifted by
/// a further `translation`, optionally with a different class mix, and a
/// fresh structural seed.
pub fn shift_domain(spec: &SyntheticSpec, angle: f64, translation: f64, proportions: Option<Vec<f64>>) -> SyntheticSpec {
    let mut out = spec.clone();
    out.rotation += angle;
    out.translation += translation;
    if let Some(p) = proportions {
        out.proportions = p;
    }
    out.seed = rng::key(0xd0, spec.seed, 1);
    out
}

/// Exact class counts by largest remainder.
fn apportion(total: usize, proportions: &[f64], minimum: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(minimum)).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let mut i = 0;
    while counts.iter().sum::<usize>() < total {
        counts[order[i % order.len()]] += 1;
        i += 1;
    }
    while counts.iter().sum::<usize>() > total {
        let j = (0..counts.len()).max_by_key(|&j| counts[j]).expect("non-empty");
        counts[j] -= 1;
    }
    counts
}

pub fn generate(spec: &SyntheticSpec) -> Result<SocialGraph> {
    spec.validate()?;
    let c = spec.num_classes();
    let k = spec.n_communities;
    let mut rng = rng::stream(spec.seed, rng::key(0xda7a, 0, 0));

    let mut labels: Vec<usize> = apportion(spec.n_docs, &spec.proportions, 0)
        .into_iter()
        .enumerate()
        .flat_map(|(y, n)| std::iter::repeat_n(y, n))
        .collect();
    labels.shuffle(&mut rng);

    // community sizes and dominant classes
    let gamma = Gamma::new(spec.community_concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let weights: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng) + 1e-12).collect();
    let mut community_of: Vec<usize> = (0..k).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    community_of.extend((k..spec.n_users).map(|_| pick.sample(&mut rng)));
    community_of.shuffle(&mut rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (u, &m) in community_of.iter().enumerate() {
        members[m].push(u);
    }
    let mut dominant: Vec<usize> = apportion(k, &spec.proportions, 1)
        .into_iter()
        .enumerate()
        .flat_map(|(y, n)| std::iter::repeat_n(y, n))
        .collect();
    dominant.shuffle(&mut rng);
    let size: Vec<f64> = members.iter().map(|m| m.len() as f64).collect();

    let pareto = Pareto::new(1.0, spec.pareto_alpha).map_err(|e| Error::Config(e.to_string()))?;
    let activity: Vec<f64> = (0..spec.n_users).map(|_| pareto.sample(&mut rng)).collect();
    let member_pick: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&u| activity[u])).expect("non-empty community"))
        .collect();

    // community choice given class
    let total: f64 = size.iter().sum();
    let by_class: Vec<WeightedIndex<f64>> = (0..c)
        .map(|y| {
            let own: f64 = (0..k).filter(|&j| dominant[j] == y).map(|j| size[j]).sum();
            let w = (0..k).map(|j| {
                let pure = if dominant[j] == y { size[j] / own } else { 0.0 };
                spec.homophily * pure + (1.0 - spec.homophily) * size[j] / total
            });
            WeightedIndex::new(w).map_err(|e| Error::Config(e.to_string()))
        })
        .collect::<Result<_>>()?;

    // users take ids 0..n_users, documents follow
    let n = spec.n_users + spec.n_docs;
    let mut kinds = vec![NodeKind::User; spec.n_users];
    kinds.resize(n, NodeKind::Document);
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    let mut degree = vec![0usize; spec.n_users];
    for (i, &y) in labels.iter().enumerate() {
        let doc = NodeId::from(spec.n_users + i);
        let want = rng.random_range(1..=spec.max_users_per_doc);
        let mut chosen: Vec<usize> = Vec::with_capacity(want);
        let mut tries = 0;
        while chosen.len() < want && tries < 64 * want {
            let j = by_class[y].sample(&mut rng);
            let u = members[j][member_pick[j].sample(&mut rng)];
            if !chosen.contains(&u) {
                chosen.push(u);
            }
            tries += 1;
        }
        for u in chosen {
            degree[u] += 1;
            edges.push((doc, NodeId::from(u)));
        }
    }

    let whole = WeightedIndex::new(&activity).map_err(|e| Error::Config(e.to_string()))?;
    let per_user = spec.user_edges.floor() as usize;
    let frac = spec.user_edges - per_user as f64;
    for u in 0..spec.n_users {
        let j = community_of[u];
        let mut count = per_user + (rng.random::<f64>() < frac) as usize;
        if count == 0 && degree[u] == 0 {
            count = 1;
        }
        for _ in 0..count {
            let v = if rng.random::<f64>() < spec.inter_rate {
                whole.sample(&mut rng)
            } else {
                members[j][member_pick[j].sample(&mut rng)]
            };
            if v != u {
                degree[u] += 1;
                degree[v] += 1;
                edges.push((NodeId::from(u), NodeId::from(v)));
            }
        }
    }

    let d = spec.feature_dim;
    let means = spec.class_means();
    let mut features = Vec::with_capacity(spec.n_docs * d);
    for &y in &labels {
        for mu in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + z);
        }
    }
    SocialGraph::new(kinds, edges, features, d, labels, c)
}
