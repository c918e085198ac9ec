use commeta::autodiff::{Matrix, Tape};
use commeta::datagen::{generate, SyntheticSpec};
use commeta::graph::{NodeId, SocialGraph};
use commeta::meta::head_probabilities;
use commeta::model::{encode, ModelConfig, ModelState, NodeBatch};
use commeta::rng;
use commeta::Error;

fn graph() -> SocialGraph {
    generate(&SyntheticSpec {
        n_docs: 80,
        n_users: 30,
        n_communities: 4,
        feature_dim: 6,
        seed: 3,
        ..SyntheticSpec::gossipcop()
    })
    .unwrap()
}

fn cfg() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        head_dim: 4,
        n_heads: 3,
        n_gat_layers: 2,
        mlp_dim: 5,
        dropout_input: 0.0,
        dropout_hidden: 0.0,
        dropout_attn: 0.0,
        ..Default::default()
    }
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix<f64>) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn times(x: &Rows, w: &Matrix<f64>) -> Rows {
    x.iter()
        .map(|r| (0..w.cols()).map(|j| r.iter().enumerate().map(|(k, v)| v * w.get(k, j)).sum()).collect())
        .collect()
}

fn affine(x: &Rows, w: &Matrix<f64>, b: &Matrix<f64>) -> Rows {
    times(x, w)
        .into_iter()
        .map(|r| r.into_iter().enumerate().map(|(j, v)| v + b.get(0, j)).collect())
        .collect()
}

fn dot(a: &[f64], b: &Matrix<f64>) -> f64 {
    a.iter().enumerate().map(|(k, v)| v * b.get(k, 0)).sum()
}

/// Textbook attention: project first, score neighbour pairs on the
/// projected rows, normalise over each node's incoming neighbours
/// (itself included) and concatenate the rectified head outputs.
fn encode_oracle(g: &SocialGraph, nodes: &[NodeId], state: &ModelState<f64>, slope: f64) -> Rows {
    let n = nodes.len();
    let mut h: Rows = nodes
        .iter()
        .map(|&v| g.features(v).map_or(vec![0.0; g.feature_dim()], |f| f.to_vec()))
        .collect();
    let incoming: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut list = vec![i];
            list.extend((0..n).filter(|&j| g.neighbours(nodes[i]).contains(&nodes[j])));
            list
        })
        .collect();
    for layer in &state.gat {
        let mut out = vec![Vec::new(); n];
        for head in layer {
            let z = times(&h, &head.weight);
            for i in 0..n {
                let scores: Vec<f64> = incoming[i]
                    .iter()
                    .map(|&j| {
                        let e = dot(&z[i], &head.attn_target) + dot(&z[j], &head.attn_source);
                        if e > 0.0 { e } else { slope * e }
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut agg = vec![0.0; z[0].len()];
                for (w, &j) in weights.iter().zip(&incoming[i]) {
                    for (a, v) in agg.iter_mut().zip(&z[j]) {
                        *a += w / total * v;
                    }
                }
                out[i].extend(agg.into_iter().map(|v| v.max(0.0)));
            }
        }
        h = out;
    }
    let mut x = affine(&h, &state.projection.weight, &state.projection.bias);
    for layer in &state.mlp {
        x = affine(&x, &layer.weight, &layer.bias).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    }
    x
}

#[test]
fn merged_projection_attention_matches_textbook_form() {
    let g = graph();
    let cfg = cfg();
    let nodes: Vec<NodeId> = (0..g.num_nodes()).step_by(2).map(NodeId::from).collect();
    let batch = NodeBatch::<f64>::induced(&g, &nodes);
    for seed in 0..5 {
        let state = ModelState::<f64>::init(&cfg, false, seed);
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false);
        let emb = encode(&mut tape, &batch, &bound, &cfg, false, &mut rng::stream(0, 0)).unwrap();
        let got = to_rows(tape.value(emb));
        let want = encode_oracle(&g, &nodes, &state, cfg.leaky_slope);
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn single_and_double_precision_agree() {
    let g = graph();
    let cfg = cfg();
    let nodes: Vec<NodeId> = (0..g.num_nodes()).map(NodeId::from).collect();
    let wide = ModelState::<f64>::init(&cfg, true, 11);
    // checkpoints store doubles, so either width loads them
    let state32 = ModelState::<f32>::from_bytes(&wide.to_bytes()).unwrap();
    let p64 = head_probabilities(&wide, &cfg, &NodeBatch::<f64>::induced(&g, &nodes)).unwrap();
    let p32 = head_probabilities(&state32, &cfg, &NodeBatch::<f32>::induced(&g, &nodes)).unwrap();
    for (a, b) in p64.data().iter().zip(p32.data()) {
        assert!((a - f64::from(*b)).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mgbc");
    let state = ModelState::<f32>::init(&cfg(), true, 4);
    state.save(&path).unwrap();
    assert_eq!(ModelState::<f32>::load(&path).unwrap(), state);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(ModelState::<f32>::load(&path), Err(Error::Ingest { .. })));
    assert!(matches!(
        ModelState::<f32>::load(&dir.path().join("missing.mgbc")),
        Err(Error::Ingest { .. })
    ));
}

#[test]
fn nodes_without_neighbours_still_attend_to_themselves() {
    let g = graph();
    let cfg = cfg();
    let lonely = [g.docs()[0]];
    let batch = NodeBatch::<f64>::induced(&g, &lonely);
    assert_eq!(batch.edge_source, vec![0]);
    let state = ModelState::<f64>::init(&cfg, true, 1);
    let p = head_probabilities(&state, &cfg, &batch).unwrap();
    assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
