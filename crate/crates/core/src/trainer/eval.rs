//! Fixed-seed evaluation of a student against the teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{sliced_w2, DEFAULT_PROJECTIONS};
use crate::model::Denoiser;
use crate::numerics::rng::StreamKey;
use crate::numerics::tensor::Matrix;
use crate::rewards::RewardKind;
use crate::schedule::NoiseSchedule;
use crate::student::{RolloutMode, Student};
use crate::teacher::{round_robin_conditions, sample_ddim, ToyTask};

/// Smallest evaluation sample.
pub const MIN_EVAL_SAMPLES: usize = 512;

/// Steps of the teacher sampler that defines the reference distribution.
pub const TEACHER_EVAL_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub sliced_w2: f64,
    /// Fraction of samples inside any mode of their condition's region.
    pub coarse_region_rate: f64,
}

/// Teacher samples with round-robin conditions, computed once per run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReference {
    pub conditions: Vec<usize>,
    pub samples: Matrix,
    key: StreamKey,
}

impl EvalReference {
    pub fn new(
        teacher: &Denoiser,
        task: &ToyTask,
        sched: &NoiseSchedule,
        n: usize,
        key: StreamKey,
    ) -> Result<Self> {
        if n < MIN_EVAL_SAMPLES {
            return Err(Error::invalid(format!(
                "evaluation needs n >= {MIN_EVAL_SAMPLES}, got {n}"
            )));
        }
        let conditions = round_robin_conditions(n, task.num_conditions());
        let samples = sample_ddim(
            teacher,
            sched,
            &conditions,
            TEACHER_EVAL_STEPS,
            &mut key.derive_str("teacher").stream(),
        )?;
        Ok(EvalReference {
            conditions,
            samples,
            key,
        })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

/// Evaluate on the reference's conditions with the reference's fixed seed.
pub fn evaluate_against(
    student: &Student,
    task: &ToyTask,
    reward: RewardKind,
    sched: &NoiseSchedule,
    reference: &EvalReference,
    mode: RolloutMode,
) -> Result<EvalReport> {
    let traj = student.rollout(
        sched,
        &reference.conditions,
        mode,
        reference.key.derive_str("student"),
    )?;
    let x = traj.endpoints();
    let r = reward.score(task, x, &reference.conditions)?;
    let n = r.len() as f64;
    let coarse = (0..x.rows)
        .filter(|&i| task.in_region(x.row(i), reference.conditions[i]))
        .count() as f64;
    Ok(EvalReport {
        mean_reward: r.iter().sum::<f64>() / n,
        sliced_w2: sliced_w2(x, &reference.samples, DEFAULT_PROJECTIONS)?,
        coarse_region_rate: coarse / n,
    })
}

/// One-shot evaluation with `n` deterministic rollouts.
pub fn evaluate(
    student: &Student,
    teacher: &Denoiser,
    task: &ToyTask,
    reward: RewardKind,
    sched: &NoiseSchedule,
    n: usize,
    key: StreamKey,
) -> Result<EvalReport> {
    let reference = EvalReference::new(teacher, task, sched, n, key)?;
    evaluate_against(
        student,
        task,
        reward,
        sched,
        &reference,
        RolloutMode::Deterministic,
    )
}
