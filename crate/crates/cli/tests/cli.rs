use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use commeta_cli::config::ExperimentConfig;

const SMALL: &str = r#"
version = 1
seed = 3
folds = 2

[graph.synthetic]
n_docs = 200
n_users = 80
n_communities = 6
feature_dim = 6

[model]
input_dim = 6
head_dim = 4
n_heads = 2
mlp_dim = 8

[sampler]
budget = 64
window = 8

[train]
paradigm = "protomaml"
max_steps = 4
inner_steps = 2
inner_lr = 0.05
val_episodes = 2

[evaluate]
k = [2]
episodes = 4

[baselines]
text_hidden = 8

[homophily]
views = 4
"#;

fn commeta(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_commeta"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn every_command_runs_on_a_small_graph() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["generate", "train", "evaluate", "ablate", "homophily", "baselines"] {
        let out = commeta(dir.path(), SMALL, &[cmd, "--workers", "2"]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let root = dir.path().join("out");
    for file in [
        "generate/graph.nodes.tsv",
        "generate/graph.features.mgbf",
        "train/checkpoints/fold0.mgbc",
        "train/checkpoints/fold1.mgbc",
        "train/logs/fold0.jsonl",
        "evaluate/k2.json",
        "evaluate/k2.episodes.jsonl",
        "evaluate/k2.fold1.manifest.jsonl",
        "ablate/k2_trained.json",
        "ablate/k2_reset.json",
        "homophily/report.json",
        "homophily/excess.jsonl",
        "baselines/text_k2.json",
        "baselines/user_id_k2.json",
    ] {
        assert!(root.join(file).is_file(), "missing {file}");
    }
    // the effective configuration is written back and parses again
    let echoed = fs::read_to_string(root.join("train/config.toml")).unwrap();
    assert!(ExperimentConfig::parse(&echoed).is_ok());
}

#[test]
fn flags_override_the_configuration() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&commeta(dir.path(), SMALL, &["train"])), 0);
    let args = ["evaluate", "--k", "1,3", "--episodes", "2", "--adaptation", "high", "--seed", "9"];
    let out = commeta(dir.path(), SMALL, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = dir.path().join("out/evaluate");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("k3.json")).unwrap()).unwrap();
    assert_eq!(report["adaptation"], "high");
    assert!(eval.join("k1.json").is_file());
    let lines = fs::read_to_string(eval.join("k1.episodes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let echoed = ExperimentConfig::parse(&fs::read_to_string(eval.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.seed, 9);

    // prototypes need support labels, so only headed models run zero-shot
    let out = commeta(dir.path(), SMALL, &["evaluate", "--zero-shot"]);
    assert_eq!(code(&out), 2);
    let headed = SMALL.replace("\"protomaml\"", "\"subgraphs\"");
    assert_eq!(code(&commeta(dir.path(), &headed, &["train"])), 0);
    assert_eq!(code(&commeta(dir.path(), &headed, &["evaluate", "--zero-shot"])), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("k2.json")).unwrap()).unwrap();
    assert_eq!(report["adaptation"], "none");
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        SMALL.replace("version = 1", "version = 7"),
        SMALL.replace("folds = 2", "folds = 2\nunknown = 1"),
        SMALL.replace("k = [2]", "k = [0]"),
        SMALL.replace("max_steps = 4", "max_steps = 0"),
        SMALL.replace("n_docs = 200", "n_docs = 200\nhomophily = 1.5"),
        SMALL.replace("[graph.synthetic]", "[graph]\npreset = \"nope\"\n[graph.synthetic]"),
        "this is not toml".to_string(),
    ];
    for cfg in &cases {
        let out = commeta(dir.path(), cfg, &["train"]);
        assert_eq!(code(&out), 2, "{cfg}\n{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = commeta(dir.path(), SMALL, &["train", "--workers", "0"]);
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_commeta")).arg("train").output().unwrap();
    assert_eq!(code(&out), 2);
    // a mismatched model width is only detectable once the graph is known
    let out = commeta(dir.path(), &SMALL.replace("input_dim = 6", "input_dim = 5"), &["train"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ingestion_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("nodes.tsv"), "0\tuser\n1\tdoc\tx\n").unwrap();
    fs::write(p.join("edges.tsv"), "0\t1\n").unwrap();
    fs::write(p.join("features.mgbf"), b"MGBF").unwrap();
    let files = format!(
        "[graph.files]\nnodes = {:?}\nedges = {:?}\nfeatures = {:?}",
        p.join("nodes.tsv"),
        p.join("edges.tsv"),
        p.join("features.mgbf")
    );
    let start = SMALL.find("[graph.synthetic]").unwrap();
    let end = SMALL.find("[model]").unwrap();
    let cfg = format!("{}{files}\n\n{}", &SMALL[..start], &SMALL[end..]);
    let out = commeta(p, &cfg, &["train"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nodes.tsv:2"));

    // evaluating without checkpoints is an ingestion failure as well
    let out = commeta(p, SMALL, &["evaluate"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn numeric_failures_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("feature_dim = 6", "feature_dim = 6\nseparation = 1e300");
    let out = commeta(dir.path(), &cfg, &["train"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
