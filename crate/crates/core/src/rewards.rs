//! Black-box rewards, group advantages, and intermediate-reward estimation
//! along deterministic or stochastic completions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::NoiseStream;
use crate::numerics::tensor::Matrix;
use crate::schedule::NoiseSchedule;
use crate::student::{RolloutMode, Student};
use crate::teacher::ToyTask;

/// Groups whose reward std falls below this carry no signal.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Closed ball of radius 3·mode_std around the condition's target mode.
    Sector,
    /// Closed ball around any mode of the condition's region.
    ModeHit,
    /// Edit-distance score on strings; not defined for 2-D samples.
    TextEdit,
}

impl RewardKind {
    /// Reward of a 2-D sample under condition `c`, in `{0, 1}`.
    pub fn point_reward(self, task: &ToyTask, x: &[f64], c: usize) -> Result<f64> {
        match self {
            RewardKind::Sector => Ok(sector_reward(task, x, c)),
            RewardKind::ModeHit => Ok(mode_hit_reward(task, x, c)),
            RewardKind::TextEdit => Err(Error::Config(
                "reward `text_edit` scores strings and cannot score 2-D samples".into(),
            )),
        }
    }

    /// Reward for every row of `x`.
    pub fn score(self, task: &ToyTask, x: &Matrix, c: &[usize]) -> Result<Vec<f64>> {
        (0..x.rows)
            .map(|r| self.point_reward(task, x.row(r), c[r]))
            .collect()
    }
}

pub fn sector_reward(task: &ToyTask, x: &[f64], c: usize) -> f64 {
    if task.within_mode(x, task.target_mode(c)) {
        1.0
    } else {
        0.0
    }
}

pub fn mode_hit_reward(task: &ToyTask, x: &[f64], c: usize) -> f64 {
    if task.in_region(x, c) {
        1.0
    } else {
        0.0
    }
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `max(1 − N_e/N_ref, 0)` with `N_e` the edit distance to the reference.
pub fn text_render_reward(pred: &str, reference: &str) -> Result<f64> {
    let n_ref = reference.chars().count();
    if n_ref == 0 {
        return Err(Error::invalid("text reward needs a nonempty reference"));
    }
    let n_e = levenshtein(pred, reference);
    Ok((1.0 - n_e as f64 / n_ref as f64).max(0.0))
}

/// `clamp((raw − lo)/(hi − lo), 0, 1)`.
pub fn normalize_reward(raw: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(hi > lo) {
        return Err(Error::invalid(format!(
            "normalize_reward needs hi > lo, got [{lo}, {hi}]"
        )));
    }
    Ok(((raw - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Rewards of one group with standardized advantages and the
/// positive/negative partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub advantages: Vec<f64>,
    /// `|A_i|`.
    pub weights: Vec<f64>,
    pub pos_idx: Vec<usize>,
    pub neg_idx: Vec<usize>,
    pub degenerate: bool,
}

impl RewardGroup {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `sign_i·w_i` with `+1` on G⁺ and `−1` on G⁻; equals `A_i`.
    pub fn signed_weights(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.len()];
        for &i in &self.pos_idx {
            s[i] = self.weights[i];
        }
        for &i in &self.neg_idx {
            s[i] = -self.weights[i];
        }
        s
    }

    /// `Σ_{G⁺} w − Σ_{G⁻} w`.
    pub fn weight_imbalance(&self) -> f64 {
        self.signed_weights().iter().sum()
    }
}

/// Population mean/std standardization. Members with `A_i = 0` fall in G⁻.
pub fn group_advantages(rewards: &[f64]) -> Result<RewardGroup> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::invalid(format!(
            "a group needs at least 2 members, got {g}"
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("group rewards".into()));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    let degenerate = std < STD_FLOOR;
    let advantages: Vec<f64> = if degenerate {
        vec![0.0; g]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    let weights = advantages.iter().map(|a| a.abs()).collect();
    let pos_idx = (0..g).filter(|&i| advantages[i] > 0.0).collect();
    let neg_idx = (0..g).filter(|&i| advantages[i] <= 0.0).collect();
    Ok(RewardGroup {
        rewards: rewards.to_vec(),
        mean,
        std,
        advantages,
        weights,
        pos_idx,
        neg_idx,
        degenerate,
    })
}

/// Reward of the endpoint reached from `x_{t_k}` (state index `k`) by the
/// student's remaining steps. In deterministic mode the completion is a
/// fixed point map, so this is the exact expected reward.
#[allow(clippy::too_many_arguments)]
pub fn intermediate_reward(
    student: &Student,
    sched: &NoiseSchedule,
    task: &ToyTask,
    reward: RewardKind,
    x_tk: &Matrix,
    k: usize,
    c: &[usize],
    mode: RolloutMode,
    noise: &mut NoiseStream,
) -> Result<Vec<f64>> {
    let x0 = student.complete(sched, x_tk, k, c, mode, noise)?;
    reward.score(task, &x0, c)
}

/// Sample variances of `n` deterministic and `n` stochastic completions of
/// one state.
#[allow(clippy::too_many_arguments)]
pub fn completion_variance_probe(
    student: &Student,
    sched: &NoiseSchedule,
    task: &ToyTask,
    reward: RewardKind,
    x_tk: &[f64],
    k: usize,
    c: usize,
    n: usize,
    noise: &mut NoiseStream,
) -> Result<(f64, f64)> {
    if n < 100 {
        return Err(Error::invalid(format!(
            "variance probe needs n >= 100, got {n}"
        )));
    }
    let mut rows = Matrix::zeros(n, x_tk.len());
    for r in 0..n {
        rows.row_mut(r).copy_from_slice(x_tk);
    }
    let cs = vec![c; n];
    let det = intermediate_reward(
        student,
        sched,
        task,
        reward,
        &rows,
        k,
        &cs,
        RolloutMode::Deterministic,
        noise,
    )?;
    let sto = intermediate_reward(
        student,
        sched,
        task,
        reward,
        &rows,
        k,
        &cs,
        RolloutMode::Stochastic,
        noise,
    )?;
    Ok((sample_variance(&det), sample_variance(&sto)))
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}
