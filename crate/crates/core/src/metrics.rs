//! Classification metrics, episodic summaries and fixed-effect pooling.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal quantile for a two-sided 90% interval.
pub const Z90: f64 = 1.645;

/// C x C counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Input(format!(
                "{} counts for a {classes}x{classes} confusion matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Input(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Input(format!("class ({t}, {p}) outside 0..{classes}")));
            }
            cm.add(t, p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_counts(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|t| (0..self.classes).map(|p| self.get(t, p)).sum())
            .collect()
    }

    pub fn predicted_counts(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|p| (0..self.classes).map(|t| self.get(t, p)).sum())
            .collect()
    }

    /// Fraction of documents whose true class is `c`.
    pub fn prevalence(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.true_counts()
            .into_iter()
            .map(|t| if n > 0.0 { t as f64 / n } else { 0.0 })
            .collect()
    }
}

/// One-vs-rest F1 per class; 0 where precision + recall is 0.
pub fn f1_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    let truth = cm.true_counts();
    let pred = cm.predicted_counts();
    (0..cm.num_classes())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let denom = (truth[c] + pred[c]) as f64;
            if tp == 0.0 || denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect()
}

/// Multi-class Matthews correlation (R_K); 0 when either marginal is degenerate.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total() as f64;
    let truth = cm.true_counts();
    let pred = cm.predicted_counts();
    let correct: f64 = (0..cm.num_classes()).map(|c| cm.get(c, c) as f64).sum();
    let tp: f64 = truth.iter().zip(&pred).map(|(&t, &p)| t as f64 * p as f64).sum();
    let tt: f64 = truth.iter().map(|&t| (t as f64).powi(2)).sum();
    let pp: f64 = pred.iter().map(|&p| (p as f64).powi(2)).sum();
    let denom = ((n * n - pp) * (n * n - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        ((correct * n - tp) / denom).clamp(-1.0, 1.0)
    }
}

/// Average precision of `scores` against binary `labels`, grouping tied
/// scores into one threshold. `None` without positives.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut new_tp = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            new_tp += labels[order[j]] as usize;
            j += 1;
        }
        tp += new_tp;
        seen = j;
        ap += new_tp as f64 / positives as f64 * (tp as f64 / seen as f64);
        i = j;
    }
    debug_assert_eq!(seen, order.len());
    Some(ap)
}

/// F1 of the always-positive classifier at prevalence `pi`.
pub fn random_f1_baseline(pi: f64) -> f64 {
    if pi <= 0.0 {
        0.0
    } else {
        2.0 * pi / (1.0 + pi)
    }
}

/// Metrics of one episode's scored query documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub scored: usize,
    pub f1: Vec<f64>,
    pub mcc: f64,
    pub aupr: Option<f64>,
    pub prevalence: Vec<f64>,
    pub random_f1: Vec<f64>,
}

/// Scores class probabilities (`probs[i]` has one entry per class) against
/// `truth`. The prediction is the arg-max; AUPR uses class 1 scores on
/// binary tasks.
pub fn score_episode(episode: u64, classes: usize, truth: &[usize], probs: &[Vec<f64>]) -> Result<EpisodeMetrics> {
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let positive: Vec<f64> = probs.iter().map(|p| p.get(1).copied().unwrap_or(0.0)).collect();
    score_predictions(episode, classes, truth, &predicted, Some(&positive))
}

/// Scores hard predictions; `positive` holds class 1 scores for AUPR on
/// binary tasks.
pub fn score_predictions(
    episode: u64,
    classes: usize,
    truth: &[usize],
    predicted: &[usize],
    positive: Option<&[f64]>,
) -> Result<EpisodeMetrics> {
    let cm = ConfusionMatrix::from_predictions(classes, truth, predicted)?;
    let aupr = match positive {
        Some(scores) if classes == 2 => {
            let labels: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            aupr(scores, &labels)
        }
        _ => None,
    };
    let prevalence = cm.prevalence();
    Ok(EpisodeMetrics {
        episode,
        scored: truth.len(),
        f1: f1_per_class(&cm),
        mcc: mcc(&cm),
        aupr,
        random_f1: prevalence.iter().map(|&p| random_f1_baseline(p)).collect(),
        prevalence,
    })
}

/// Index of the largest value, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
        .0
}

/// Sample mean, sample variance and a normal-approximation 90% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    /// Squared standard error of the mean, `variance / n`.
    pub se2: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

pub fn episode_summary(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Input("no episode values to summarise".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let se2 = variance / n as f64;
    let half = Z90 * se2.sqrt();
    Ok(Summary {
        n,
        mean,
        variance,
        se2,
        ci_lower: mean - half,
        ci_upper: mean + half,
    })
}

/// Inverse-variance pooled estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub mean: f64,
    pub variance: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Fixed-effect pooling of `(mean, variance)` pairs. A zero variance is
/// replaced by the smallest positive one; if none is positive the plain
/// mean is returned with zero variance.
pub fn pool_checkpoints(items: &[(f64, f64)]) -> Result<Pooled> {
    if items.is_empty() {
        return Err(Error::Input("no checkpoints to pool".into()));
    }
    if items.iter().any(|&(m, v)| !m.is_finite() || !v.is_finite() || v < 0.0) {
        return Err(Error::Numeric("non-finite or negative checkpoint summary".into()));
    }
    let floor = items.iter().map(|&(_, v)| v).filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        let mean = items.iter().map(|&(m, _)| m).sum::<f64>() / items.len() as f64;
        return Ok(Pooled {
            mean,
            variance: 0.0,
            ci_lower: mean,
            ci_upper: mean,
        });
    }
    let (mut sw, mut swm) = (0.0, 0.0);
    for &(m, v) in items {
        let w = 1.0 / if v > 0.0 { v } else { floor };
        sw += w;
        swm += w * m;
    }
    let mean = swm / sw;
    let variance = 1.0 / sw;
    let half = Z90 * variance.sqrt();
    Ok(Pooled {
        mean,
        variance,
        ci_lower: mean - half,
        ci_upper: mean + half,
    })
}

/// Summaries of one checkpoint over its episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub checkpoint: String,
    pub f1: Vec<Summary>,
    pub mcc: Summary,
    pub aupr: Option<Summary>,
    pub random_f1: Vec<f64>,
}

impl CheckpointReport {
    pub fn from_episodes(checkpoint: impl Into<String>, episodes: &[EpisodeMetrics]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Input("checkpoint has no evaluated episodes".into()))?;
        let classes = first.f1.len();
        let column = |f: &dyn Fn(&EpisodeMetrics) -> f64| -> Vec<f64> { episodes.iter().map(f).collect() };
        let f1 = (0..classes)
            .map(|c| episode_summary(&column(&|e| e.f1[c])))
            .collect::<Result<_>>()?;
        let mcc = episode_summary(&column(&|e| e.mcc))?;
        let aupr_values: Vec<f64> = episodes.iter().filter_map(|e| e.aupr).collect();
        let aupr = if aupr_values.is_empty() {
            None
        } else {
            Some(episode_summary(&aupr_values)?)
        };
        let random_f1 = (0..classes)
            .map(|c| column(&|e| e.random_f1[c]).iter().sum::<f64>() / episodes.len() as f64)
            .collect();
        Ok(Self {
            checkpoint: checkpoint.into(),
            f1,
            mcc,
            aupr,
            random_f1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub f1: Vec<Pooled>,
    pub mcc: Pooled,
    pub aupr: Option<Pooled>,
    pub random_f1: Vec<f64>,
}

/// Per-checkpoint and pooled metrics for one model at one shot count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub k_shot: usize,
    pub episodes: usize,
    pub num_classes: usize,
    pub adaptation: String,
    pub checkpoints: Vec<CheckpointReport>,
    pub pooled: PooledMetrics,
}

impl MetricsReport {
    /// Pools checkpoint summaries using the squared standard error of each
    /// checkpoint mean as its variance.
    pub fn new(
        model: impl Into<String>,
        k_shot: usize,
        adaptation: impl Into<String>,
        checkpoints: Vec<CheckpointReport>,
    ) -> Result<Self> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::Input("report needs at least one checkpoint".into()))?;
        let classes = first.f1.len();
        let pool = |f: &dyn Fn(&CheckpointReport) -> Summary| {
            pool_checkpoints(&checkpoints.iter().map(|c| (f(c).mean, f(c).se2)).collect::<Vec<_>>())
        };
        let f1 = (0..classes).map(|c| pool(&|r| r.f1[c])).collect::<Result<_>>()?;
        let mcc = pool(&|r| r.mcc)?;
        let aupr = if checkpoints.iter().all(|c| c.aupr.is_some()) {
            Some(pool(&|r| r.aupr.expect("checked"))?)
        } else {
            None
        };
        let random_f1 = (0..classes)
            .map(|c| checkpoints.iter().map(|r| r.random_f1[c]).sum::<f64>() / checkpoints.len() as f64)
            .collect();
        Ok(Self {
            model: model.into(),
            k_shot,
            episodes: first.mcc.n,
            num_classes: classes,
            adaptation: adaptation.into(),
            pooled: PooledMetrics {
                f1,
                mcc,
                aupr,
                random_f1,
            },
            checkpoints,
        })
    }
}

fn cell(mean: f64, lo: f64, hi: f64) -> String {
    format!("{mean:.4} [{lo:.4}, {hi:.4}]")
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "model {}  k={}  episodes={}  adaptation={}",
            self.model, self.k_shot, self.episodes, self.adaptation
        )?;
        let mut header = format!("{:<12}", "");
        for c in 0..self.num_classes {
            write!(header, " | {:<26}", format!("F1 class {c}")).unwrap();
        }
        write!(header, " | {:<26} | {:<26}", "MCC", "AUPR").unwrap();
        writeln!(f, "{header}")?;
        let mut b = format!("{:<12}", "B");
        for v in &self.pooled.random_f1 {
            write!(b, " | {:<26}", format!("{v:.4}")).unwrap();
        }
        write!(b, " | {:<26} | {:<26}", "", "").unwrap();
        writeln!(f, "{b}")?;
        for r in &self.checkpoints {
            let mut line = format!("{:<12}", r.checkpoint);
            for s in &r.f1 {
                write!(line, " | {:<26}", cell(s.mean, s.ci_lower, s.ci_upper)).unwrap();
            }
            let aupr = r.aupr.map_or("-".to_string(), |s| cell(s.mean, s.ci_lower, s.ci_upper));
            write!(line, " | {:<26} | {:<26}", cell(r.mcc.mean, r.mcc.ci_lower, r.mcc.ci_upper), aupr).unwrap();
            writeln!(f, "{line}")?;
        }
        let p = &self.pooled;
        let mut line = format!("{:<12}", "pooled");
        for s in &p.f1 {
            write!(line, " | {:<26}", cell(s.mean, s.ci_lower, s.ci_upper)).unwrap();
        }
        let aupr = p.aupr.map_or("-".to_string(), |s| cell(s.mean, s.ci_lower, s.ci_upper));
        write!(line, " | {:<26} | {:<26}", cell(p.mcc.mean, p.mcc.ci_lower, p.mcc.ci_upper), aupr).unwrap();
        writeln!(f, "{line}")
    }
}
