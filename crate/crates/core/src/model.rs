//! GAT community model.
//!
//! Encoder: node-wise input dropout, stacked multi-head graph attention
//! layers (heads concatenated), a linear projection, and a two-layer ReLU
//! MLP producing node embeddings. A separate affine head maps embeddings to
//! class logits; the head is optional so prototype-based paradigms can run
//! without one.
//!
//! Attention uses merged projections: the logit for edge `u -> v` is
//! `leaky_relu(h_v (W a_t) + h_u (W a_s))`, so each head projects the node
//! matrix through `W` once for messages and through two `d x 1` vectors for
//! attention scores.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{NodeId, SocialGraph};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub n_gat_layers: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub dropout_input: f64,
    pub dropout_hidden: f64,
    pub dropout_attn: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 768,
            head_dim: 256,
            n_heads: 3,
            n_gat_layers: 2,
            mlp_dim: 64,
            num_classes: 2,
            dropout_input: 0.1,
            dropout_hidden: 0.1,
            dropout_attn: 0.1,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.head_dim, self.n_heads, self.n_gat_layers, self.mlp_dim];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        for p in [self.dropout_input, self.dropout_hidden, self.dropout_attn] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Matrix<S>,
    pub bias: Matrix<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_fan_in(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<S> {
    /// Projection `W: in x head_dim`.
    pub weight: Matrix<S>,
    /// Attention vector applied to the receiving node, `head_dim x 1`.
    pub attn_target: Matrix<S>,
    /// Attention vector applied to the sending node, `head_dim x 1`.
    pub attn_source: Matrix<S>,
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub gat: Vec<Vec<AttentionHead<S>>>,
    pub projection: Linear<S>,
    pub mlp: Vec<Linear<S>>,
    pub head: Option<Linear<S>>,
}

fn uniform_fan_in<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<S> {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| S::of(rng.random_range(-bound..bound)))
}

impl<S: Scalar> ModelState<S> {
    pub fn init(cfg: &ModelConfig, with_head: bool, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::key(0x1417, 0, 0));
        let mut gat = Vec::new();
        let mut width = cfg.input_dim;
        for _ in 0..cfg.n_gat_layers {
            let heads = (0..cfg.n_heads)
                .map(|_| AttentionHead {
                    weight: uniform_fan_in(width, cfg.head_dim, &mut rng),
                    attn_target: uniform_fan_in(cfg.head_dim, 1, &mut rng),
                    attn_source: uniform_fan_in(cfg.head_dim, 1, &mut rng),
                })
                .collect();
            gat.push(heads);
            width = cfg.n_heads * cfg.head_dim;
        }
        let projection = Linear::init(width, cfg.mlp_dim, &mut rng);
        let mlp = vec![
            Linear::init(cfg.mlp_dim, cfg.mlp_dim, &mut rng),
            Linear::init(cfg.mlp_dim, cfg.mlp_dim, &mut rng),
        ];
        let head = with_head.then(|| Linear::init(cfg.mlp_dim, cfg.num_classes, &mut rng));
        Self {
            gat,
            projection,
            mlp,
            head,
        }
    }

    /// Fresh initialisation with identical shapes (weights uniform by fan-in,
    /// biases zero).
    pub fn reset_weights(&self, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::key(0x4e5e, 0, 0));
        let mut out = self.clone();
        let names = out.param_names();
        for (name, p) in names.iter().zip(out.params_mut()) {
            *p = if name.ends_with("bias") {
                Matrix::zeros(p.rows(), p.cols())
            } else {
                uniform_fan_in(p.rows(), p.cols(), &mut rng)
            };
        }
        out
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.last().map_or(0, |l| l.weight.cols())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, heads) in self.gat.iter().enumerate() {
            for h in 0..heads.len() {
                for part in ["weight", "attn_target", "attn_source"] {
                    names.push(format!("gat.{l}.{h}.{part}"));
                }
            }
        }
        names.push("projection.weight".into());
        names.push("projection.bias".into());
        for i in 0..self.mlp.len() {
            names.push(format!("mlp.{i}.weight"));
            names.push(format!("mlp.{i}.bias"));
        }
        if self.head.is_some() {
            names.push("head.weight".into());
            names.push("head.bias".into());
        }
        names
    }

    /// Parameters in a fixed order: encoder first, head (if any) last.
    pub fn params(&self) -> Vec<&Matrix<S>> {
        let mut out = Vec::new();
        for heads in &self.gat {
            for h in heads {
                out.extend([&h.weight, &h.attn_target, &h.attn_source]);
            }
        }
        out.extend([&self.projection.weight, &self.projection.bias]);
        for l in &self.mlp {
            out.extend([&l.weight, &l.bias]);
        }
        if let Some(h) = &self.head {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut out = Vec::new();
        for heads in &mut self.gat {
            for h in heads {
                out.extend([&mut h.weight, &mut h.attn_target, &mut h.attn_source]);
            }
        }
        out.extend([&mut self.projection.weight, &mut self.projection.bias]);
        for l in &mut self.mlp {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        if let Some(h) = &mut self.head {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    /// Number of encoder parameters; head parameters follow them in [`Self::params`].
    pub fn encoder_len(&self) -> usize {
        self.params().len() - if self.head.is_some() { 2 } else { 0 }
    }

    /// Records every parameter on `tape` (as trainable leaves when
    /// `trainable`, constants otherwise).
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundModel {
        let mut leaf = |m: &Matrix<S>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let gat = self
            .gat
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|h| BoundHead {
                        weight: leaf(&h.weight),
                        attn_target: leaf(&h.attn_target),
                        attn_source: leaf(&h.attn_source),
                    })
                    .collect()
            })
            .collect();
        let mut bind_linear = |l: &Linear<S>| BoundLinear {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        let projection = bind_linear(&self.projection);
        let mlp = self.mlp.iter().map(&mut bind_linear).collect();
        let head = self.head.as_ref().map(bind_linear);
        BoundModel {
            gat,
            projection,
            mlp,
            head,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let names = self.param_names();
        out.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for (name, p) in names.iter().zip(self.params()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
            for v in p.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("missing MGBC magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                data.push(S::of(v));
            }
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
            records.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Self::from_records(records)
    }

    fn from_records(records: Vec<(String, Matrix<S>)>) -> std::result::Result<Self, String> {
        let mut it = records.into_iter().peekable();
        let expect = |name: &str, it: &mut std::iter::Peekable<std::vec::IntoIter<(String, Matrix<S>)>>| {
            match it.next() {
                Some((n, m)) if n == name => Ok(m),
                Some((n, _)) => Err(format!("expected record {name}, found {n}")),
                None => Err(format!("missing record {name}")),
            }
        };
        let mut gat: Vec<Vec<AttentionHead<S>>> = Vec::new();
        while let Some((name, _)) = it.peek() {
            let Some(rest) = name.strip_prefix("gat.") else { break };
            let mut parts = rest.split('.');
            let l: usize = parts.next().and_then(|s| s.parse().ok()).ok_or("bad gat record")?;
            let h: usize = parts.next().and_then(|s| s.parse().ok()).ok_or("bad gat record")?;
            if l == gat.len() {
                gat.push(Vec::new());
            }
            if l + 1 != gat.len() || h != gat[l].len() {
                return Err(format!("out-of-order record {name}"));
            }
            let weight = expect(&format!("gat.{l}.{h}.weight"), &mut it)?;
            let attn_target = expect(&format!("gat.{l}.{h}.attn_target"), &mut it)?;
            let attn_source = expect(&format!("gat.{l}.{h}.attn_source"), &mut it)?;
            gat[l].push(AttentionHead {
                weight,
                attn_target,
                attn_source,
            });
        }
        let projection = Linear {
            weight: expect("projection.weight", &mut it)?,
            bias: expect("projection.bias", &mut it)?,
        };
        let mut mlp = Vec::new();
        while it.peek().is_some_and(|(n, _)| n.starts_with("mlp.")) {
            let i = mlp.len();
            mlp.push(Linear {
                weight: expect(&format!("mlp.{i}.weight"), &mut it)?,
                bias: expect(&format!("mlp.{i}.bias"), &mut it)?,
            });
        }
        let head = if it.peek().is_some() {
            Some(Linear {
                weight: expect("head.weight", &mut it)?,
                bias: expect("head.bias", &mut it)?,
            })
        } else {
            None
        };
        if let Some((n, _)) = it.next() {
            return Err(format!("unexpected record {n}"));
        }
        Ok(Self {
            gat,
            projection,
            mlp,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::ingest(path, 0, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::ingest(path, 0, msg))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGBC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err("truncated checkpoint".into());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: Var,
    pub attn_target: Var,
    pub attn_source: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every parameter of a [`ModelState`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub gat: Vec<Vec<BoundHead>>,
    pub projection: BoundLinear,
    pub mlp: Vec<BoundLinear>,
    pub head: Option<BoundLinear>,
}

impl BoundModel {
    /// Handles in the same order as [`ModelState::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for heads in &self.gat {
            for h in heads {
                out.extend([h.weight, h.attn_target, h.attn_source]);
            }
        }
        out.extend([self.projection.weight, self.projection.bias]);
        for l in &self.mlp {
            out.extend([l.weight, l.bias]);
        }
        if let Some(h) = &self.head {
            out.extend([h.weight, h.bias]);
        }
        out
    }
}

/// Message-passing input for one subgraph.
#[derive(Clone, Debug)]
pub struct NodeBatch<S> {
    /// Parent-graph ids; local index = position.
    pub nodes: Vec<NodeId>,
    /// One row per node: document features, or zeros for users.
    pub features: Matrix<S>,
    pub is_doc: Vec<bool>,
    /// Directed message edges `source -> target` (local indices), both
    /// directions of every stored edge plus one self-loop per node, sorted
    /// by target.
    pub edge_source: Vec<usize>,
    pub edge_target: Vec<usize>,
}

impl<S: Scalar> NodeBatch<S> {
    /// Builds the batch for the subgraph of `g` induced by `nodes`.
    pub fn induced(g: &SocialGraph, nodes: &[NodeId]) -> Self {
        let mut local = vec![u32::MAX; g.num_nodes()];
        for (i, v) in nodes.iter().enumerate() {
            local[v.index()] = i as u32;
        }
        let mut edges = Vec::new();
        for (i, &v) in nodes.iter().enumerate() {
            edges.push((i, i));
            for &u in g.neighbours(v) {
                let j = local[u.index()];
                if j != u32::MAX {
                    edges.push((i, j as usize));
                }
            }
        }
        Self::from_parts(g, nodes, edges)
    }

    /// `edges` are `(target, source)` pairs in local indices and must already
    /// contain both directions and the self-loops.
    fn from_parts(g: &SocialGraph, nodes: &[NodeId], mut edges: Vec<(usize, usize)>) -> Self {
        edges.sort_unstable();
        let d = g.feature_dim();
        let mut features = Matrix::zeros(nodes.len(), d);
        let mut is_doc = vec![false; nodes.len()];
        for (i, &v) in nodes.iter().enumerate() {
            if let Some(x) = g.features(v) {
                is_doc[i] = true;
                for (o, &xv) in features.row_mut(i).iter_mut().zip(x) {
                    *o = S::of(xv);
                }
            }
        }
        Self {
            nodes: nodes.to_vec(),
            features,
            is_doc,
            edge_target: edges.iter().map(|e| e.0).collect(),
            edge_source: edges.iter().map(|e| e.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Local index of every parent id present in the batch.
    pub fn local_index(&self) -> std::collections::HashMap<NodeId, usize> {
        self.nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect()
    }
}

/// Output of one attention layer.
pub struct GatOutput {
    pub output: Var,
    /// Per-head attention weights, one row per message edge.
    pub attention: Vec<Var>,
}

/// One multi-head graph attention layer; head outputs are concatenated.
#[allow(clippy::too_many_arguments)]
pub fn gat_layer<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    h: Var,
    edge_source: &[usize],
    edge_target: &[usize],
    heads: &[BoundHead],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<GatOutput> {
    let n = tape.shape(h).0;
    let mut covered = vec![false; n];
    for &t in edge_target {
        covered[t] = true;
    }
    if let Some(v) = covered.iter().position(|c| !c) {
        return Err(Error::Structural(format!("node {v} has an empty attention segment")));
    }
    let mut outputs = Vec::with_capacity(heads.len());
    let mut attention = Vec::with_capacity(heads.len());
    for head in heads {
        let z = tape.matmul(h, head.weight)?;
        // merged projections: h (W a) instead of (h W) a
        let wt = tape.matmul(head.weight, head.attn_target)?;
        let ws = tape.matmul(head.weight, head.attn_source)?;
        let st = tape.matmul(h, wt)?;
        let ss = tape.matmul(h, ws)?;
        let st_e = tape.gather_rows(st, edge_target)?;
        let ss_e = tape.gather_rows(ss, edge_source)?;
        let logit = tape.add(st_e, ss_e)?;
        let logit = tape.leaky_relu(logit, S::of(cfg.leaky_slope))?;
        let alpha = tape.segment_softmax(logit, edge_target, n)?;
        attention.push(alpha);
        let alpha = tape.dropout(alpha, cfg.dropout_attn, training, rng)?;
        let msg = tape.gather_rows(z, edge_source)?;
        let msg = tape.mul(msg, alpha)?;
        let agg = tape.segment_sum(msg, edge_target, n)?;
        outputs.push(tape.relu(agg)?);
    }
    let output = if outputs.len() == 1 { outputs[0] } else { tape.concat(&outputs)? };
    Ok(GatOutput { output, attention })
}

/// Node embeddings of width `mlp_dim` for every node of `batch`.
pub fn encode<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    batch: &NodeBatch<S>,
    model: &BoundModel,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let mut h = tape.constant(batch.features.clone());
    if training && cfg.dropout_input > 0.0 {
        // whole document rows are dropped; user rows are zero already
        let keep = 1.0 / (1.0 - cfg.dropout_input);
        let mask = Matrix::from_fn(batch.len(), 1, |i, _| {
            if batch.is_doc[i] && rng.random::<f64>() < cfg.dropout_input {
                S::zero()
            } else {
                S::of(keep)
            }
        });
        let mask = tape.constant(mask);
        h = tape.mul(h, mask)?;
    }
    for heads in &model.gat {
        let out = gat_layer(tape, h, &batch.edge_source, &batch.edge_target, heads, cfg, training, rng)?;
        h = tape.dropout(out.output, cfg.dropout_hidden, training, rng)?;
    }
    let mut x = linear(tape, h, &model.projection)?;
    for layer in &model.mlp {
        x = linear(tape, x, layer)?;
        x = tape.relu(x)?;
        x = tape.dropout(x, cfg.dropout_hidden, training, rng)?;
    }
    Ok(x)
}

pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, layer: &BoundLinear) -> Result<Var> {
    let y = tape.matmul(x, layer.weight)?;
    tape.add(y, layer.bias)
}

/// Affine classification head: embeddings to `C` logits.
pub fn classify_head<S: Scalar>(tape: &mut Tape<S>, embeddings: Var, head: &BoundLinear) -> Result<Var> {
    linear(tape, embeddings, head)
}

/// Graph-free two-layer MLP over document features (text-only baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct TextBaseline<S> {
    pub mlp: Vec<Linear<S>>,
    pub head: Linear<S>,
}

impl<S: Scalar> TextBaseline<S> {
    pub fn init(input_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::key(0x7e47, 0, 0));
        Self {
            mlp: vec![
                Linear::init(input_dim, hidden, &mut rng),
                Linear::init(hidden, hidden, &mut rng),
            ],
            head: Linear::init(hidden, num_classes, &mut rng),
        }
    }

    pub fn params(&self) -> Vec<&Matrix<S>> {
        let mut out = Vec::new();
        for l in self.mlp.iter().chain(std::iter::once(&self.head)) {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut out = Vec::new();
        for l in self.mlp.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    /// Logits for the rows of `features`; returns the parameter handles in
    /// [`Self::params`] order alongside.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        features: Matrix<S>,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        let mut vars = Vec::new();
        let mut x = tape.constant(features);
        for l in &self.mlp {
            let b = BoundLinear {
                weight: tape.param(l.weight.clone()),
                bias: tape.param(l.bias.clone()),
            };
            vars.extend([b.weight, b.bias]);
            x = linear(tape, x, &b)?;
            x = tape.relu(x)?;
            x = tape.dropout(x, dropout, training, rng)?;
        }
        let head = BoundLinear {
            weight: tape.param(self.head.weight.clone()),
            bias: tape.param(self.head.bias.clone()),
        };
        vars.extend([head.weight, head.bias]);
        Ok((linear(tape, x, &head)?, vars))
    }
}

/// Predictions of the neighbouring-user vote baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct UserVotes {
    /// Predicted class per document row.
    pub predicted: Vec<usize>,
    /// Share of user votes for class 1 per document row (the train-split
    /// class-1 prevalence when no user votes), usable as a binary score.
    pub positive_share: Vec<f64>,
}

/// Each user adjacent to a document votes for the most common class among
/// its train-split documents (users with none, or with a tied majority,
/// abstain); the document takes the plurality vote, falling back to the
/// global train majority on ties or when no user votes.
pub fn user_id_baseline(g: &SocialGraph, train_docs: &[NodeId]) -> UserVotes {
    let c = g.num_classes();
    let mut is_train = vec![false; g.num_nodes()];
    let mut prior = vec![0usize; c];
    for &d in train_docs {
        is_train[d.index()] = true;
        if let Some(y) = g.label(d) {
            prior[y] += 1;
        }
    }
    let majority = argmax_unique(&prior).unwrap_or(0);
    let total_train: usize = prior.iter().sum();
    let prior_pos = if total_train == 0 { 0.0 } else { prior.get(1).copied().unwrap_or(0) as f64 / total_train as f64 };

    let mut user_vote = vec![None; g.num_nodes()];
    for u in g.users() {
        let mut counts = vec![0usize; c];
        for &d in g.neighbours(u) {
            if is_train[d.index()] {
                if let Some(y) = g.label(d) {
                    counts[y] += 1;
                }
            }
        }
        user_vote[u.index()] = argmax_unique(&counts);
    }

    let mut predicted = Vec::with_capacity(g.num_docs());
    let mut positive_share = Vec::with_capacity(g.num_docs());
    for &d in g.docs() {
        let mut votes = vec![0usize; c];
        for &u in g.neighbours(d) {
            if let Some(y) = user_vote[u.index()] {
                votes[y] += 1;
            }
        }
        let n: usize = votes.iter().sum();
        predicted.push(argmax_unique(&votes).unwrap_or(majority));
        positive_share.push(if n == 0 { prior_pos } else { votes.get(1).copied().unwrap_or(0) as f64 / n as f64 });
    }
    UserVotes {
        predicted,
        positive_share,
    }
}

/// Index of the strict maximum of non-zero counts; `None` if all zero or tied.
fn argmax_unique(counts: &[usize]) -> Option<usize> {
    let max = *counts.iter().max()?;
    if max == 0 {
        return None;
    }
    let mut it = counts.iter().enumerate().filter(|(_, &n)| n == max);
    let first = it.next().map(|(i, _)| i);
    if it.next().is_some() {
        None
    } else {
        first
    }
}
