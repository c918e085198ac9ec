//! Command implementations. Every command writes into its own directory
//! under the output root, next to the effective configuration.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use commeta::graph::{stratified_kfold, FoldSplit, NodeId, SocialGraph};
use commeta::homophily::{self, LabelledView};
use commeta::meta::{self, EvalConfig, EvalRun, Evaluated, Paradigm, StepLog, TrainConfig};
use commeta::metrics::{CheckpointReport, EpisodeMetrics, MetricsReport};
use commeta::model::{self, ModelState};
use commeta::sampler::{self, EpisodeRecord, QueryPlan, SubgraphView};
use commeta::{io, rng, Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Evaluate,
    Ablate,
    Homophily,
    Baselines,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Homophily => "homophily",
            Command::Baselines => "baselines",
        }
    }
}

/// A configured run rooted at `out`.
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config: ExperimentConfig, out: PathBuf) -> Self {
        Self { config, out }
    }

    pub fn execute(&self, command: Command) -> Result<PathBuf> {
        self.config.validate()?;
        let dir = self.out.join(command.name());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        match command {
            Command::Generate => self.generate(&dir)?,
            Command::Train => self.train(&dir)?,
            Command::Evaluate => self.evaluate(&dir)?,
            Command::Ablate => self.ablate(&dir)?,
            Command::Homophily => self.homophily(&dir)?,
            Command::Baselines => self.baselines(&dir)?,
        }
        Ok(dir)
    }

    fn generate(&self, dir: &Path) -> Result<()> {
        let g = self.config.load_graph()?;
        write_graph_files(&g, dir, "graph")?;
        if let Some(t) = self.config.load_target()? {
            write_graph_files(&t, dir, "target")?;
        }
        Ok(())
    }

    fn folds(&self, g: &SocialGraph) -> Result<Vec<FoldSplit>> {
        stratified_kfold(g, self.config.folds, self.config.seed)
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.config
            .evaluate
            .checkpoints
            .clone()
            .unwrap_or_else(|| self.out.join("train").join("checkpoints"))
    }

    fn train(&self, dir: &Path) -> Result<()> {
        let cfg = &self.config;
        let g = cfg.load_graph()?;
        let (scfg, tcfg) = cfg.seeded();
        scfg.validate(g.num_classes())?;
        check_input_dim(cfg, &g)?;
        let folds = self.folds(&g)?;
        write_json(&dir.join("folds.json"), &folds)?;
        let ckpt = dir.join("checkpoints");
        let logs = dir.join("logs");
        fs::create_dir_all(&ckpt)?;
        fs::create_dir_all(&logs)?;
        for fold in &folds {
            let log_path = logs.join(format!("fold{}.jsonl", fold.fold_id));
            let mut log = BufWriter::new(fs::File::create(&log_path)?);
            let mut io_err = None;
            let trained = meta::train::<f64>(&g, fold, &cfg.model, &scfg, &tcfg, &mut |rec: &StepLog| {
                if let Err(e) = write_line(&mut log, rec) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e);
            }
            let path = ckpt.join(format!("fold{}.mgbc", fold.fold_id));
            trained.state.save(&path)?;
            let done = StepLog {
                step: trained.steps_run,
                val_loss: trained.best_val,
                best: true,
                checkpoint: Some(format!("checkpoints/fold{}.mgbc", fold.fold_id)),
                ..Default::default()
            };
            write_line(&mut log, &done)?;
            let mut traces = BufWriter::new(fs::File::create(logs.join(format!("fold{}.traces.jsonl", fold.fold_id)))?);
            for t in &trained.traces {
                write_line(&mut traces, t)?;
            }
            traces.flush()?;
            log.flush()?;
            log::info!(
                "fold {}: {} steps, best validation loss {:?}",
                fold.fold_id,
                trained.steps_run,
                trained.best_val
            );
        }
        Ok(())
    }

    fn load_checkpoints(&self) -> Result<Vec<(usize, ModelState<f64>)>> {
        let dir = self.checkpoint_dir();
        let mut out = Vec::new();
        for i in 0..self.config.folds {
            let path = dir.join(format!("fold{i}.mgbc"));
            out.push((i, ModelState::load(&path)?));
        }
        Ok(out)
    }

    /// Evaluation graph and, per checkpoint, the document pool it is scored on.
    fn eval_setup(&self) -> Result<(SocialGraph, Vec<Vec<NodeId>>)> {
        let n = self.config.folds;
        match self.config.load_target()? {
            Some(t) => {
                let pool = t.docs().to_vec();
                Ok((t, vec![pool; n]))
            }
            None => {
                let g = self.config.load_graph()?;
                let pools = self.folds(&g)?.into_iter().map(|f| f.val_docs).collect();
                Ok((g, pools))
            }
        }
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let (g, pools) = self.eval_setup()?;
        let checkpoints = self.load_checkpoints()?;
        let paradigm = self.config.train.paradigm;
        let label = if self.config.evaluate.zero_shot {
            format!("{paradigm}-zero-shot")
        } else {
            paradigm.to_string()
        };
        self.evaluate_models(dir, &g, &pools, &checkpoints, paradigm, &label, "")
    }

    fn ablate(&self, dir: &Path) -> Result<()> {
        let (g, pools) = self.eval_setup()?;
        let trained = self.load_checkpoints()?;
        let paradigm = self.config.train.paradigm;
        let reset: Vec<_> = trained
            .iter()
            .map(|(i, s)| (*i, s.reset_weights(rng::key(self.config.seed, *i as u64, 0x4e5e))))
            .collect();
        self.evaluate_models(dir, &g, &pools, &trained, paradigm, &paradigm.to_string(), "trained")?;
        self.evaluate_models(dir, &g, &pools, &reset, paradigm, &format!("{paradigm}-reset"), "reset")
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate_models(
        &self,
        dir: &Path,
        g: &SocialGraph,
        pools: &[Vec<NodeId>],
        checkpoints: &[(usize, ModelState<f64>)],
        paradigm: Paradigm,
        label: &str,
        suffix: &str,
    ) -> Result<()> {
        let cfg = &self.config;
        let (scfg, _) = cfg.seeded();
        let mut mcfg = cfg.model.clone();
        mcfg.num_classes = g.num_classes();
        if mcfg.input_dim != g.feature_dim() {
            return Err(Error::Config(format!(
                "model input_dim {} does not match evaluation features {}",
                mcfg.input_dim,
                g.feature_dim()
            )));
        }
        for &k in &cfg.evaluate.k {
            let ecfg = EvalConfig {
                k_shot: k,
                episodes: cfg.evaluate.episodes,
                profile: cfg.profile(),
                zero_shot: cfg.evaluate.zero_shot,
                seed: cfg.seed,
            };
            let what = |state| Evaluated::Model {
                state,
                config: &mcfg,
                paradigm,
            };
            let runs: Vec<(String, EvalRun)> = checkpoints
                .iter()
                .map(|(i, state)| Ok((format!("fold{i}"), meta::evaluate(g, &pools[*i], &what(state), &scfg, &ecfg)?)))
                .collect::<Result<_>>()?;
            let stem = if suffix.is_empty() { format!("k{k}") } else { format!("k{k}_{suffix}") };
            self.write_eval(dir, &stem, label, k, &runs)?;
        }
        Ok(())
    }

    fn write_eval(&self, dir: &Path, stem: &str, label: &str, k: usize, runs: &[(String, EvalRun)]) -> Result<()> {
        let reports = runs
            .iter()
            .map(|(name, run)| CheckpointReport::from_episodes(name.clone(), &run.metrics))
            .collect::<Result<Vec<_>>>()?;
        let adaptation = if self.config.evaluate.zero_shot {
            "none".to_string()
        } else {
            self.config.evaluate.adaptation.name().to_string()
        };
        let report = MetricsReport::new(label, k, adaptation, reports)?;
        write_json(&dir.join(format!("{stem}.json")), &report)?;
        fs::write(dir.join(format!("{stem}.txt")), report.to_string())?;

        let mut episodes = BufWriter::new(fs::File::create(dir.join(format!("{stem}.episodes.jsonl")))?);
        let mut traces = match runs.iter().any(|(_, r)| !r.traces.is_empty()) {
            true => Some(BufWriter::new(fs::File::create(dir.join(format!("{stem}.traces.jsonl")))?)),
            false => None,
        };
        for (name, run) in runs {
            for m in &run.metrics {
                write_line(&mut episodes, &Tagged { checkpoint: name, item: m })?;
            }
            if let Some(out) = traces.as_mut() {
                for t in &run.traces {
                    write_line(out, &Tagged { checkpoint: name, item: t })?;
                }
            }
            if run.skipped > 0 {
                log::warn!("{name}: {} episodes skipped after numeric failure", run.skipped);
            }
            if self.config.evaluate.manifests {
                write_manifest(&dir.join(format!("{stem}.{name}.manifest.jsonl")), &run.manifest)?;
            }
        }
        episodes.flush()?;
        if let Some(mut out) = traces {
            out.flush()?;
        }
        Ok(())
    }

    fn baselines(&self, dir: &Path) -> Result<()> {
        let cfg = &self.config;
        let g = cfg.load_graph()?;
        let (scfg, tcfg) = cfg.seeded();
        scfg.validate(g.num_classes())?;
        let folds = self.folds(&g)?;
        let text_cfg = TrainConfig {
            paradigm: Paradigm::Full,
            inner_steps: 0,
            ..tcfg
        };
        let mut text_probs = Vec::new();
        let mut votes = Vec::new();
        for fold in &folds {
            let text = meta::train_text::<f64>(&g, fold, cfg.baselines.text_hidden, cfg.baselines.text_dropout, &text_cfg)?;
            text_probs.push(meta::text_probabilities(&g, &text, &fold.val_docs)?);
            votes.push(model::user_id_baseline(&g, &fold.train_docs));
        }
        for &k in &cfg.evaluate.k {
            let ecfg = EvalConfig {
                k_shot: k,
                episodes: cfg.evaluate.episodes,
                profile: cfg.profile(),
                zero_shot: false,
                seed: cfg.seed,
            };
            let mut text_runs = Vec::new();
            let mut vote_runs = Vec::new();
            for (i, fold) in folds.iter().enumerate() {
                let name = format!("fold{}", fold.fold_id);
                let fixed: Evaluated<'_, f64> = Evaluated::Fixed(text_probs[i].clone());
                text_runs.push((name.clone(), meta::evaluate(&g, &fold.val_docs, &fixed, &scfg, &ecfg)?));
                let v: Evaluated<'_, f64> = Evaluated::Votes(&votes[i]);
                vote_runs.push((name, meta::evaluate(&g, &fold.val_docs, &v, &scfg, &ecfg)?));
            }
            self.write_eval(dir, &format!("text_k{k}"), "text", k, &text_runs)?;
            self.write_eval(dir, &format!("user_id_k{k}"), "user_id", k, &vote_runs)?;
        }
        Ok(())
    }

    fn homophily(&self, dir: &Path) -> Result<()> {
        let cfg = &self.config;
        let g = if cfg.homophily.on_target {
            cfg.load_target()?
                .ok_or_else(|| Error::Config("homophily.on_target needs a target graph".into()))?
        } else {
            cfg.load_graph()?
        };
        let r = cfg.homophily.radius;
        let mut views: Vec<(u64, String, LabelledView)> = Vec::new();
        let records: Vec<(u64, SubgraphView, SubgraphView)> = match &cfg.homophily.manifest {
            Some(path) => read_manifest(path)?
                .into_iter()
                .map(|rec| {
                    let support = SubgraphView::induced(&g, rec.support_nodes.clone());
                    let query = sampler::query_view(&g, &rec.query_targets, 2)?;
                    Ok((rec.episode, support, query))
                })
                .collect::<Result<_>>()?,
            None => {
                let (scfg, _) = cfg.seeded();
                let pool = g.docs().to_vec();
                let plan = QueryPlan::Balanced {
                    pool: pool.clone(),
                    per_class: scfg.query_per_class,
                };
                sampler::episode_stream(&g, &pool, &plan, &scfg, 0, cfg.homophily.views)?
                    .into_iter()
                    .map(|e| (e.index, e.support, (*e.query).clone()))
                    .collect()
            }
        };
        for (id, support, query) in &records {
            views.push((*id, "support".into(), LabelledView::new(&g, support)));
            views.push((*id, "query".into(), LabelledView::targets_only(&g, query)));
        }
        let (report, raw) = homophily::homophily_profile(&g, &views, r);
        write_json(&dir.join("report.json"), &report)?;
        let mut out = BufWriter::new(fs::File::create(dir.join("excess.jsonl"))?);
        homophily::write_records(&mut out, &raw)?;
        out.flush()?;
        Ok(())
    }
}

fn check_input_dim(cfg: &ExperimentConfig, g: &SocialGraph) -> Result<()> {
    if cfg.model.input_dim != g.feature_dim() {
        return Err(Error::Config(format!(
            "model.input_dim {} does not match the graph's feature width {}",
            cfg.model.input_dim,
            g.feature_dim()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    checkpoint: &'a str,
    #[serde(flatten)]
    item: &'a T,
}

fn write_graph_files(g: &SocialGraph, dir: &Path, stem: &str) -> Result<()> {
    io::write_graph(
        g,
        &dir.join(format!("{stem}.nodes.tsv")),
        &dir.join(format!("{stem}.edges.tsv")),
        &dir.join(format!("{stem}.features.mgbf")),
    )
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_line<W: Write, T: Serialize + ?Sized>(out: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(json_err)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn write_manifest(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        write_line(&mut out, r)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an episode manifest (one JSON record per line).
pub fn read_manifest(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Reads per-episode metrics exported by `evaluate`.
pub fn read_episode_metrics(path: &Path) -> Result<Vec<(String, EpisodeMetrics)>> {
    #[derive(serde::Deserialize)]
    struct Line {
        checkpoint: String,
        #[serde(flatten)]
        metrics: EpisodeMetrics,
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let line: Line = serde_json::from_str(l).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            Ok((line.checkpoint, line.metrics))
        })
        .collect()
}
