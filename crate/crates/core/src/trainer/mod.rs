//! Reinforcement of a distilled few-step student with a diffusion-based
//! surrogate reward, its ablations and baselines, and evaluation.

pub mod config;
pub mod distill;
pub mod eval;
pub mod grads;
pub mod run;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::numerics::rng::StreamKey;
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::student::Student;
use crate::teacher::ToyTask;

pub use config::{
    Baseline, BetaGRule, DistillConfig, GeneratorLevels, RewardGradForm, RlTeacherConfig,
    RolloutPolicy, SurrogateMode, TrainerConfig,
};
pub use distill::{distill, DistillMetricsRow, Distilled};
pub use eval::{evaluate, evaluate_against, EvalReference, EvalReport, MIN_EVAL_SAMPLES};
pub use grads::{
    combine_generator_grads, resolve_beta_g, reward_input_grad, reward_term_grad, RewardDraw,
    RewardEstimator, RewardTerm,
};
pub use run::{
    iterations_to_reward, EvalRow, MetricsRow, R1Trainer, StepDetail, CLOCK_FILE, METRICS_HEADER,
};

/// Result of the reinforce-then-distill baseline.
pub struct RlTeacherRun {
    /// Per-iteration rows of the many-step policy's reinforcement phase.
    pub rl_metrics: Vec<MetricsRow>,
    pub rl_policy: Student,
    pub distilled: Distilled,
}

/// Reinforce a many-step copy of the teacher with the group loss applied to
/// its own denoiser (no distribution-matching term), then distill the
/// result into a `distill_cfg.steps`-step student.
pub fn distill_from_rl_teacher(
    teacher: &Denoiser,
    task: &ToyTask,
    sched: &NoiseSchedule,
    cfg: &TrainerConfig,
    distill_cfg: &DistillConfig,
    key: StreamKey,
) -> Result<RlTeacherRun> {
    let rl = &cfg.rl_teacher;
    let policy = Student::new(teacher.clone(), StepGrid::uniform(sched.t_max(), rl.steps)?);
    let phase_cfg = TrainerConfig {
        baseline: Baseline::DirectRlLoss,
        beta_g: BetaGRule::Fixed { value: 0.0 },
        iterations: rl.iterations,
        lr_student: rl.lr,
        surrogate_mode: SurrogateMode::Dynamic,
        ..cfg.clone()
    };
    let mut trainer = R1Trainer::new(
        phase_cfg,
        task.clone(),
        sched.clone(),
        teacher.clone(),
        policy,
        teacher.clone(),
        key.derive_str("rl_policy"),
    )?;
    let mut rl_metrics = Vec::new();
    trainer.run(|_, row| {
        rl_metrics.push(row.clone());
        Ok(())
    })?;
    let rl_policy = trainer.student.clone();
    let distilled = distill(
        &rl_policy.model,
        task,
        sched,
        distill_cfg,
        key.derive_str("rl_teacher"),
    )?;
    Ok(RlTeacherRun {
        rl_metrics,
        rl_policy,
        distilled,
    })
}

/// Write rows as CSV with a header from the row type's field order.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read rows written by [`write_csv`].
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingInput {
            what: "csv file".into(),
            path: path.to_path_buf(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
