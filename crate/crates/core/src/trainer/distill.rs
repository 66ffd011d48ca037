//! Few-step distillation of a teacher into a student by trajectory
//! distribution matching, with a fake score tracking the student.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::numerics::optim::{AdamConfig, AdamState};
use crate::numerics::rng::StreamKey;
use crate::rewards::RewardKind;
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::student::{fake_score_update, tdm_update, RolloutMode, Student};
use crate::teacher::ToyTask;
use crate::trainer::config::DistillConfig;
use crate::trainer::eval::{evaluate_against, EvalReference};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetricsRow {
    pub iteration: usize,
    pub fake_loss: f64,
    pub kl_term_grad_norm: f64,
    /// Sector-reward rate at the last evaluation.
    pub sector_rate: f64,
    pub sliced_w2_to_teacher: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct Distilled {
    pub student: Student,
    pub fake: Denoiser,
    pub metrics: Vec<DistillMetricsRow>,
}

/// Student and fake score both start as copies of `teacher`.
pub fn distill(
    teacher: &Denoiser,
    task: &ToyTask,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    key: StreamKey,
) -> Result<Distilled> {
    cfg.validate()?;
    let key = key.derive_str("distill");
    let grid = StepGrid::uniform(sched.t_max(), cfg.steps)?;
    let mut student = Student::new(teacher.clone(), grid);
    let mut fake = teacher.clone();
    let mut student_adam =
        AdamState::new(AdamConfig::with_lr(cfg.lr_student), student.model.params());
    let mut fake_adam = AdamState::new(AdamConfig::with_lr(cfg.lr_fake), fake.params());
    let eval_ref = EvalReference::new(
        teacher,
        task,
        sched,
        cfg.eval_samples.max(512),
        key.derive_str("eval"),
    )?;
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut last_eval = (f64::NAN, f64::NAN);
    for it in 1..=cfg.iterations {
        let ik = key.derive(it as u64);
        let mut cond_rng = ik.derive_str("conditions").stream();
        let c: Vec<usize> = (0..cfg.batch_size)
            .map(|_| cond_rng.index(task.num_conditions()))
            .collect();
        let traj = student
            .rollout(
                sched,
                &c,
                RolloutMode::Deterministic,
                ik.derive_str("rollout"),
            )
            .map_err(|e| diverged(it, e))?;
        let mut fake_rng = ik.derive_str("fake").stream();
        let mut fake_loss = 0.0;
        for _ in 0..cfg.fake_updates {
            fake_loss = fake_score_update(
                &mut fake,
                &mut fake_adam,
                traj.endpoints(),
                &c,
                sched,
                cfg.fake_weighting,
                &mut fake_rng,
            )
            .map_err(|e| diverged(it, e))?;
        }
        let mut gen_rng = ik.derive_str("generator").stream();
        let k = gen_rng.index(cfg.steps);
        let g = tdm_update(
            &mut student,
            &mut student_adam,
            &fake,
            teacher,
            sched,
            &traj,
            k,
            cfg.lambda_rule,
            cfg.backprop_path,
            &mut gen_rng,
        )
        .map_err(|e| diverged(it, e))?;
        if it == 1 || it % cfg.eval_every == 0 || it == cfg.iterations {
            let e = evaluate_against(
                &student,
                task,
                RewardKind::Sector,
                sched,
                &eval_ref,
                RolloutMode::Deterministic,
            )?;
            last_eval = (e.mean_reward, e.sliced_w2);
            log::info!(
                "distill it {it}: fake {fake_loss:.4} sector {:.3} sliced_w2 {:.4}",
                e.mean_reward,
                e.sliced_w2
            );
        }
        metrics.push(DistillMetricsRow {
            iteration: it,
            fake_loss,
            kl_term_grad_norm: g.norm(),
            sector_rate: last_eval.0,
            sliced_w2_to_teacher: last_eval.1,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Distilled {
        student,
        fake,
        metrics,
    })
}

pub(crate) fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged {
            iteration,
            message: m,
        },
        other => other,
    }
}
