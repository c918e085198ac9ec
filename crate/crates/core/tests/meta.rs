use commeta::autodiff::Matrix;
use commeta::datagen::{generate, SyntheticSpec};
use commeta::graph::{stratified_kfold, SocialGraph};
use commeta::meta::{
    embeddings, episode_gradient, head_loss_grad, head_probabilities, inner_adapt, lr_at, outer_step,
    proto_classify, protomaml_head_init, prototypes, train, AdaptProfile, AdamW, EpisodeTasks, Paradigm,
    Task, TrainConfig,
};
use commeta::model::{ModelConfig, ModelState, NodeBatch};
use commeta::rng;
use commeta::sampler::{episode_stream, Episode, QueryPlan, SamplerConfig};

fn graph() -> SocialGraph {
    generate(&SyntheticSpec {
        n_docs: 600,
        n_users: 200,
        n_communities: 10,
        feature_dim: 6,
        seed: 13,
        ..SyntheticSpec::gossipcop()
    })
    .unwrap()
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        head_dim: 4,
        n_heads: 2,
        mlp_dim: 8,
        dropout_input: 0.0,
        dropout_hidden: 0.0,
        dropout_attn: 0.0,
        ..Default::default()
    }
}

fn episodes(g: &SocialGraph, n: usize, seed: u64) -> Vec<Episode> {
    let cfg = SamplerConfig {
        budget: 96,
        seed,
        ..Default::default()
    };
    let pool = g.docs().to_vec();
    let plan = QueryPlan::Balanced { pool: pool.clone(), per_class: 6 };
    episode_stream(g, &pool, &plan, &cfg, 0, n).unwrap()
}

fn max_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn protomaml_head_reproduces_prototype_probabilities() {
    let g = graph();
    let cfg = model_cfg();
    for (i, ep) in episodes(&g, 100, 1).iter().enumerate() {
        let mut state = ModelState::<f64>::init(&cfg, false, i as u64);
        let support = Task::<f64>::support(&g, ep);
        let emb = embeddings(&state, &cfg, &support.batch).unwrap();
        let protos = prototypes(&emb, &support.targets, 2).unwrap();
        let query = NodeBatch::<f64>::induced(&g, &ep.query.nodes);
        let expected = proto_classify(&embeddings(&state, &cfg, &query).unwrap(), &protos);
        state.head = Some(protomaml_head_init(&protos));
        let got = head_probabilities(&state, &cfg, &query).unwrap();
        assert!(max_diff(&got, &expected) < 1e-10, "episode {i}");
    }
}

#[test]
fn prototypes_are_class_means() {
    let emb = Matrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 6.0]).unwrap();
    let p = prototypes(&emb, &[(0, 0), (1, 0), (2, 1)], 2).unwrap();
    assert_eq!(p.data(), &[2.0, 3.0, -1.0, 0.0]);
}

#[test]
fn one_inner_step_moves_the_bias_by_the_mean_residual() {
    let g = graph();
    let cfg = model_cfg();
    let ep = &episodes(&g, 1, 2)[0];
    let state = ModelState::<f64>::init(&cfg, true, 3);
    let support = Task::<f64>::support(&g, ep);
    let lr = 0.3;
    let profile = AdaptProfile { inner_lr: lr, inner_steps: 1 };
    let (adapted, trace) = inner_adapt(&state, &cfg, &support, profile, false, 0, &mut rng::stream(0, 0)).unwrap();
    // d CE / d b = mean over labelled rows of (softmax - onehot)
    let probs = head_probabilities(&state, &cfg, &support.batch).unwrap();
    let n = support.targets.len() as f64;
    for c in 0..2 {
        let residual: f64 = support
            .targets
            .iter()
            .map(|&(row, y)| probs.get(row, c) - if y == c { 1.0 } else { 0.0 })
            .sum::<f64>()
            / n;
        let before = state.head.as_ref().unwrap().bias.get(0, c);
        let after = adapted.head.as_ref().unwrap().bias.get(0, c);
        assert!((after - (before - lr * residual)).abs() < 1e-12);
    }
    assert!(trace.support_after < trace.support_before);
}

#[test]
fn first_order_gradient_is_query_gradient_at_adapted_weights() {
    let g = graph();
    let cfg = model_cfg();
    let ep = &episodes(&g, 1, 3)[0];
    let tasks = EpisodeTasks::<f64>::new(&g, ep);
    let state = ModelState::<f64>::init(&cfg, true, 4);
    let profile = AdaptProfile { inner_lr: 0.1, inner_steps: 3 };
    let (_, grads, _) = episode_gradient(&state, &cfg, Paradigm::MamlLh, &tasks, profile, 2, 0).unwrap();
    let mut r = rng::stream(0, 0);
    let (adapted, _) = inner_adapt(&state, &cfg, &tasks.support, profile, true, 0, &mut r).unwrap();
    let (_, expected) = head_loss_grad(&adapted, &cfg, &tasks.query, true, &mut r).unwrap();
    for (a, b) in grads.iter().zip(&expected) {
        assert!(max_diff(a.as_ref().unwrap(), b.as_ref().unwrap()) < 1e-12);
    }
}

#[test]
fn random_head_maml_never_updates_the_head() {
    let g = graph();
    let cfg = model_cfg();
    let tasks: Vec<EpisodeTasks<f64>> = episodes(&g, 8, 4).iter().map(|e| EpisodeTasks::new(&g, e)).collect();
    let mut state = ModelState::<f64>::init(&cfg, true, 5);
    let head = state.head.clone();
    let encoder = state.projection.weight.clone();
    let mut opt = AdamW::new(&state.params(), 0.01);
    let profile = AdaptProfile { inner_lr: 0.1, inner_steps: 2 };
    for chunk in tasks.chunks(2) {
        outer_step(&mut state, &mut opt, &cfg, Paradigm::MamlRh, chunk, profile, 2, 0.01, 0).unwrap();
    }
    assert_eq!(state.head, head);
    assert_ne!(state.projection.weight, encoder);
}

#[test]
fn learning_rate_steps_and_floors() {
    let cfg = TrainConfig {
        outer_lr: 0.1,
        lr_decay: 0.5,
        lr_floor: 0.1,
        max_steps: 100,
        ..Default::default()
    };
    assert_eq!(cfg.decay_every(), 5);
    assert_eq!(lr_at(&cfg, 0), 0.1);
    assert_eq!(lr_at(&cfg, 4), 0.1);
    assert_eq!(lr_at(&cfg, 5), 0.05);
    assert_eq!(lr_at(&cfg, 10), 0.025);
    assert!((lr_at(&cfg, 99) - 0.01).abs() < 1e-15);
    let tiny = TrainConfig { max_steps: 7, ..cfg };
    assert_eq!(tiny.decay_every(), 1);
}

#[test]
fn adamw_matches_hand_updates() {
    let mut w = Matrix::scalar(1.0f64);
    let mut opt = AdamW::new(&[&w], 0.1);
    let grads = [0.5, -0.2, 0.3];
    let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
    for (t, &g) in grads.iter().enumerate() {
        opt.step(vec![&mut w], &[Some(Matrix::scalar(g))], 0.01);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
        let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
        x = x * (1.0 - 0.01 * 0.1) - 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((w.get(0, 0) - x).abs() < 1e-15);
    }
    // frozen parameters are untouched
    let before = w.clone();
    opt.step(vec![&mut w], &[None], 0.01);
    assert_eq!(w, before);
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let g = graph();
    let fold = &stratified_kfold(&g, 3, 0).unwrap()[0];
    let scfg = SamplerConfig {
        budget: 96,
        window: 8,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        paradigm: Paradigm::Protomaml,
        max_steps: 6,
        inner_steps: 2,
        inner_lr: 0.05,
        val_episodes: 2,
        ..Default::default()
    };
    let mut cfg = model_cfg();
    cfg.dropout_hidden = 0.1;
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train::<f64>(&g, fold, &cfg, &scfg, &tcfg, &mut |_| {}).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.state.to_bytes(), b.state.to_bytes());
    assert_eq!(a.best_step, b.best_step);
}

#[test]
fn protonet_with_inner_steps_is_rejected() {
    let cfg = TrainConfig {
        paradigm: Paradigm::Protonet,
        inner_steps: 1,
        ..Default::default()
    };
    assert!(matches!(cfg.validate(), Err(commeta::Error::Config(_))));
}
