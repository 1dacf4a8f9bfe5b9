//! Training-dynamics analysis over per-epoch snapshots: difficulty scores,
//! output entropy, correct-class trajectories and their comparison.

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, CrossEntropyObjective};
use crate::autodiff::LOG_FLOOR;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Teacher,
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Natural,
    Adversarial,
}

/// Correct-class probability of one sample after each of K epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub sample_id: usize,
    pub probs: Vec<f64>,
    pub model_tag: ModelTag,
    pub input_kind: InputKind,
}

impl Trajectory {
    pub fn last(&self) -> f64 {
        *self.probs.last().expect("trajectory is non-empty")
    }
}

/// Samples ordered easiest first; ties broken by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyRanking {
    entries: Vec<(usize, f64)>,
}

impl DifficultyRanking {
    /// `scores[i]` is the score of sample id `i`.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("scores", "difficulty scores must be finite and >= 0"));
        }
        let mut entries: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(DifficultyRanking { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_snapshots(snapshots: &[Model]) -> Result<()> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::invalid("snapshots", "need at least one snapshot"))?;
    if snapshots.iter().any(|m| m.spec != first.spec) {
        return Err(Error::invalid("snapshots", "snapshots must share one spec"));
    }
    Ok(())
}

fn check_labels(x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.rows() != labels.len() {
        return Err(Error::Shape {
            op: "analysis",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// `S(x) = (1/K) Σ_k CE(f_k(x), y)` for every row of `x`.
pub fn difficulty_scores(snapshots: &[Model], x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_snapshots(snapshots)?;
    check_labels(x, labels)?;
    let mut total = vec![0.0; labels.len()];
    for m in snapshots {
        let p = m.predict_probs(x)?;
        for (i, &y) in labels.iter().enumerate() {
            total[i] += -(p.row(i)[y] + LOG_FLOOR).ln();
        }
    }
    let k = snapshots.len() as f64;
    Ok(total.into_iter().map(|t| t / k).collect())
}

pub fn difficulty_score(snapshots: &[Model], x: &[f64], y: usize) -> Result<f64> {
    let row = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(difficulty_scores(snapshots, &row, &[y])?[0])
}

/// Mean Shannon entropy (natural log) of the rows of a probability matrix.
pub fn mean_entropy_of(probs: &Tensor) -> f64 {
    let n = probs.rows();
    let total: f64 = (0..n)
        .map(|i| {
            probs
                .row(i)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

pub fn mean_entropy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "empty dataset"));
    }
    Ok(mean_entropy_of(&model.predict_probs(&dataset.inputs)?))
}

/// Trajectories for every row of `x`. With an attack, each snapshot is
/// attacked separately (the adversarial input is regenerated against `f_k`).
pub fn record_trajectories(
    snapshots: &[Model],
    x: &Tensor,
    labels: &[usize],
    attack_cfg: Option<&AttackConfig>,
    model_tag: ModelTag,
) -> Result<Vec<Trajectory>> {
    check_snapshots(snapshots)?;
    check_labels(x, labels)?;
    let mut probs = vec![Vec::with_capacity(snapshots.len()); labels.len()];
    for (k, m) in snapshots.iter().enumerate() {
        let input = match attack_cfg {
            Some(a) => {
                let a = a.clone().with_seed(seed::derive(a.seed, &[seed::ATTACK, k as u64]));
                attack::attack(&CrossEntropyObjective::new(m), x, labels, &a)?
            }
            None => x.clone(),
        };
        let p = m.predict_probs(&input)?;
        for (i, &y) in labels.iter().enumerate() {
            probs[i].push(p.row(i)[y].clamp(0.0, 1.0));
        }
    }
    let input_kind = if attack_cfg.is_some() {
        InputKind::Adversarial
    } else {
        InputKind::Natural
    };
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(sample_id, probs)| Trajectory {
            sample_id,
            probs,
            model_tag,
            input_kind,
        })
        .collect())
}

pub fn record_trajectory(
    snapshots: &[Model],
    x: &[f64],
    y: usize,
    attack_cfg: Option<&AttackConfig>,
    model_tag: ModelTag,
) -> Result<Trajectory> {
    let row = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(record_trajectories(snapshots, &row, &[y], attack_cfg, model_tag)?.remove(0))
}

fn check_pair(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.probs.len() != b.probs.len() {
        return Err(Error::invalid("trajectory", format!("lengths {} and {}", a.probs.len(), b.probs.len())));
    }
    Ok(())
}

pub fn inner_product(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.probs.iter().zip(&b.probs).map(|(x, y)| x * y).sum())
}

/// `⟨a, b⟩ / (‖a‖ ‖b‖)`; undefined (error) for an all-zero trajectory.
pub fn cosine_similarity(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    let dot = inner_product(a, b)?;
    let na = a.probs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.probs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("trajectory", "cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// One point of an improvement curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImprovementPoint {
    pub rank: usize,
    pub sample_id: usize,
    /// `p_S,K − p_T,K`
    pub delta: f64,
}

/// Final-epoch student minus teacher probability, in ranking order.
pub fn improvement_curve(
    student: &[Trajectory],
    teacher: &[Trajectory],
    ranking: &DifficultyRanking,
) -> Result<Vec<ImprovementPoint>> {
    let lookup = |set: &[Trajectory], id: usize| -> Result<f64> {
        set.iter()
            .find(|t| t.sample_id == id)
            .map(Trajectory::last)
            .ok_or_else(|| Error::invalid("sample_id", format!("no trajectory for sample {id}")))
    };
    if student.len() != teacher.len() || student.len() != ranking.len() {
        return Err(Error::invalid("sample_id", "trajectory sets and ranking differ in size"));
    }
    let by_id = |set: &[Trajectory]| set.iter().enumerate().all(|(i, t)| t.sample_id == i);
    ranking
        .entries()
        .iter()
        .enumerate()
        .map(|(rank, &(id, _))| {
            // Fast path for trajectories stored in id order.
            let (s, t) = if by_id(student) && by_id(teacher) && id < student.len() {
                (student[id].last(), teacher[id].last())
            } else {
                (lookup(student, id)?, lookup(teacher, id)?)
            };
            Ok(ImprovementPoint {
                rank,
                sample_id: id,
                delta: s - t,
            })
        })
        .collect()
}

/// Centered moving average; windows shrink at the edges.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("window", format!("{window} must be odd and >= 1")));
    }
    if window > series.len() {
        return Err(Error::invalid("window", format!("{window} exceeds series length {}", series.len())));
    }
    let half = window / 2;
    let mut prefix = vec![0.0; series.len() + 1];
    for (i, v) in series.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    Ok((0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(series.len() - 1);
            if window == 1 {
                series[i]
            } else {
                (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
            }
        })
        .collect())
}

/// The `n` lowest-score and `n` highest-score sample ids.
pub fn rank_extremes(ranking: &DifficultyRanking, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n > ranking.len() {
        return Err(Error::invalid("n", format!("{n} exceeds {} samples", ranking.len())));
    }
    let easiest = ranking.entries().iter().take(n).map(|e| e.0).collect();
    let mut desc = ranking.entries().to_vec();
    desc.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let hardest = desc.iter().take(n).map(|e| e.0).collect();
    Ok((easiest, hardest))
}
