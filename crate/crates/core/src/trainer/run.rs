//! The alternating three-network loop: rollout, score, surrogate update,
//! fake-score update, generator update.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::numerics::checkpoint;
use crate::numerics::optim::{AdamConfig, AdamState, EmaState};
use crate::numerics::rng::{NoiseStream, StreamKey};
use crate::numerics::tensor::{Grads, ParamStore};
use crate::rewards::{group_advantages, RewardGroup};
use crate::schedule::NoiseSchedule;
use crate::student::{fake_score_update, kl_term_grad, Student, TrajectoryBatch};
use crate::surrogate::{
    sample_surrogate_batch, surrogate_loss, surrogate_update, GroupRef, ReferenceModel,
};
use crate::teacher::ToyTask;
use crate::trainer::config::{Baseline, RolloutPolicy, SurrogateMode, TrainerConfig};
use crate::trainer::distill::diverged;
use crate::trainer::eval::{evaluate_against, EvalReference, EvalReport};
use crate::trainer::grads::{
    combine_generator_grads, resolve_beta_g, reward_term_grad, RewardEstimator,
};

/// One row of `metrics.csv` per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub surrogate_loss: f64,
    pub fake_loss: f64,
    pub reward_term_grad_norm: f64,
    pub kl_term_grad_norm: f64,
    pub beta_g_effective: f64,
    pub sliced_w2_to_teacher: f64,
    pub wall_clock_s: f64,
}

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: [&str; 10] = [
    "iteration",
    "mean_reward",
    "std_reward",
    "surrogate_loss",
    "fake_loss",
    "reward_term_grad_norm",
    "kl_term_grad_norm",
    "beta_g_effective",
    "sliced_w2_to_teacher",
    "wall_clock_s",
];

/// A periodic fixed-seed evaluation; `iteration` counts completed updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub sliced_w2: f64,
    pub coarse_region_rate: f64,
}

impl EvalRow {
    fn new(iteration: usize, e: EvalReport) -> Self {
        EvalRow {
            iteration,
            mean_reward: e.mean_reward,
            sliced_w2: e.sliced_w2,
            coarse_region_rate: e.coarse_region_rate,
        }
    }
}

/// First evaluation at which the mean reward reaches `threshold`.
pub fn iterations_to_reward(evals: &[EvalRow], threshold: f64) -> Option<usize> {
    evals
        .iter()
        .find(|e| e.mean_reward >= threshold)
        .map(|e| e.iteration)
}

/// Everything one iteration produced, for inspection in tests.
#[derive(Clone, Debug)]
pub struct StepDetail {
    pub trajectories: TrajectoryBatch,
    pub groups: Vec<RewardGroup>,
    pub level: usize,
    pub reward_grad: Grads,
    pub kl_grad: Grads,
    pub total_grad: Grads,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    iteration: usize,
    beta_g_last: f64,
    last_w2: f64,
    student_adam_step: u64,
    fake_adam_step: u64,
    surrogate_adam_step: u64,
    evals: Vec<EvalRow>,
}

/// Wall-clock time, kept apart from `state.json` so that checkpoints of
/// identical runs are byte-identical.
#[derive(Serialize, Deserialize)]
struct ClockState {
    elapsed_s: f64,
}

/// Checkpoint file holding [`ClockState`].
pub const CLOCK_FILE: &str = "clock.json";

pub struct R1Trainer {
    cfg: TrainerConfig,
    task: ToyTask,
    sched: NoiseSchedule,
    teacher: Denoiser,
    pub student: Student,
    student_adam: AdamState,
    pub fake: Denoiser,
    fake_adam: AdamState,
    pub surrogate: Denoiser,
    surrogate_adam: AdamState,
    pub reference: ReferenceModel,
    /// The student before any reinforcement.
    pre_rl: Denoiser,
    rollout_ema: Option<EmaState>,
    beta_g_last: f64,
    iteration: usize,
    key: StreamKey,
    eval_ref: EvalReference,
    initial_eval: EvalReport,
    last_w2: f64,
    evals: Vec<EvalRow>,
    elapsed_offset: f64,
    start: Instant,
}

impl R1Trainer {
    /// Set up from a teacher and a distilled student/fake pair. The
    /// surrogate and its reference start as copies of the teacher.
    pub fn new(
        cfg: TrainerConfig,
        task: ToyTask,
        sched: NoiseSchedule,
        teacher: Denoiser,
        student: Student,
        fake: Denoiser,
        key: StreamKey,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.baseline == Baseline::DistillFromRlTeacher {
            return Err(Error::Config(
                "distill_from_rl_teacher runs through trainer::distill_from_rl_teacher".into(),
            ));
        }
        let key = key.derive_str("r1");
        let surrogate = teacher.clone();
        let reference = ReferenceModel::new(surrogate.params(), cfg.reference_mode)?;
        let rollout_ema = match cfg.rollout_policy {
            RolloutPolicy::Current => None,
            RolloutPolicy::Ema { decay } => Some(EmaState::new(student.model.params(), decay)?),
        };
        let eval_ref = EvalReference::new(
            &teacher,
            &task,
            &sched,
            cfg.eval_samples,
            key.derive_str("eval"),
        )?;
        let initial_eval = evaluate_against(
            &student,
            &task,
            cfg.reward,
            &sched,
            &eval_ref,
            cfg.rollout_mode,
        )?;
        let mut trainer = R1Trainer {
            student_adam: AdamState::new(
                AdamConfig::with_lr(cfg.lr_student),
                student.model.params(),
            ),
            fake_adam: AdamState::new(AdamConfig::with_lr(cfg.lr_fake), fake.params()),
            surrogate_adam: AdamState::new(
                AdamConfig::with_lr(cfg.lr_surrogate),
                surrogate.params(),
            ),
            pre_rl: student.model.clone(),
            cfg,
            task,
            sched,
            teacher,
            student,
            fake,
            surrogate,
            reference,
            rollout_ema,
            beta_g_last: 1.0,
            iteration: 0,
            key,
            eval_ref,
            initial_eval,
            last_w2: initial_eval.sliced_w2,
            evals: vec![EvalRow::new(0, initial_eval)],
            elapsed_offset: 0.0,
            start: Instant::now(),
        };
        if let SurrogateMode::FrozenPretrained { iterations } = trainer.cfg.surrogate_mode {
            trainer.pretrain_surrogate(iterations)?;
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn teacher(&self) -> &Denoiser {
        &self.teacher
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Evaluation of the student before reinforcement.
    pub fn initial_eval(&self) -> EvalReport {
        self.initial_eval
    }

    pub fn evals(&self) -> &[EvalRow] {
        &self.evals
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate_against(
            &self.student,
            &self.task,
            self.cfg.reward,
            &self.sched,
            &self.eval_ref,
            self.cfg.rollout_mode,
        )
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.iterations
            || self.cfg.stop_at_reward.is_some_and(|r| {
                self.evals
                    .last()
                    .is_some_and(|e| e.iteration > 0 && e.mean_reward >= r)
            })
    }

    /// Fit `φ` alone against the frozen student, then keep it fixed.
    fn pretrain_surrogate(&mut self, iterations: usize) -> Result<()> {
        let key = self.key.derive_str("surrogate_pretrain");
        for j in 0..iterations {
            let jk = key.derive(j as u64);
            let (traj, groups) = self.rollout_groups(jk, &self.student)?;
            let refm = self.reference_denoiser()?;
            let mut rng = jk.derive_str("surrogate").stream();
            if let Some(batch) = self.surrogate_batch(&traj, &groups, &mut rng)? {
                surrogate_update(
                    &mut self.surrogate,
                    &mut self.surrogate_adam,
                    &refm,
                    &self.sched,
                    &batch,
                    self.cfg.beta,
                )
                .map_err(|e| diverged(j, e))?;
            }
            self.reference.update(self.surrogate.params(), j + 1)?;
        }
        Ok(())
    }

    fn reference_denoiser(&self) -> Result<Denoiser> {
        self.surrogate.with_params(self.reference.params().clone())
    }

    fn rollout_policy(&self) -> Result<Option<Student>> {
        match &self.rollout_ema {
            None => Ok(None),
            Some(ema) => Ok(Some(Student::new(
                self.student.model.with_params(ema.shadow.clone())?,
                self.student.grid().clone(),
            ))),
        }
    }

    /// Sample conditions, roll out `G` members each and score them.
    fn rollout_groups(
        &self,
        ik: StreamKey,
        policy: &Student,
    ) -> Result<(TrajectoryBatch, Vec<RewardGroup>)> {
        let g = self.cfg.group_size;
        let mut rng = ik.derive_str("conditions").stream();
        let conds: Vec<usize> = (0..self.cfg.conditions_per_iteration)
            .map(|_| rng.index(self.task.num_conditions()))
            .collect();
        let c_all: Vec<usize> = conds
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, g))
            .collect();
        let traj = policy.rollout(
            &self.sched,
            &c_all,
            self.cfg.rollout_mode,
            ik.derive_str("rollout"),
        )?;
        let rewards = self
            .cfg
            .reward
            .score(&self.task, traj.endpoints(), &c_all)?;
        let groups = rewards
            .chunks(g)
            .map(group_advantages)
            .collect::<Result<Vec<_>>>()?;
        Ok((traj, groups))
    }

    fn surrogate_batch(
        &self,
        traj: &TrajectoryBatch,
        groups: &[RewardGroup],
        rng: &mut NoiseStream,
    ) -> Result<Option<crate::surrogate::SurrogateBatch>> {
        let g = self.cfg.group_size;
        let parts: Vec<TrajectoryBatch> = (0..groups.len())
            .map(|j| traj.select(&(j * g..(j + 1) * g).collect::<Vec<_>>()))
            .collect();
        let refs: Vec<GroupRef<'_>> = parts
            .iter()
            .zip(groups)
            .map(|(t, r)| GroupRef {
                traj: t,
                rewards: r,
            })
            .collect();
        let levels: Vec<usize> = (0..self.student.steps()).collect();
        sample_surrogate_batch(
            &refs,
            &levels,
            self.student.grid(),
            &self.sched,
            self.cfg.surrogate_draws,
            self.cfg.time_sampling,
            rng,
        )
    }

    /// One iteration of the configured algorithm.
    pub fn step(&mut self) -> Result<MetricsRow> {
        Ok(self.step_detailed()?.0)
    }

    pub fn step_detailed(&mut self) -> Result<(MetricsRow, StepDetail)> {
        let it = self.iteration;
        self.step_inner(it).map_err(|e| diverged(it, e))
    }

    fn step_inner(&mut self, it: usize) -> Result<(MetricsRow, StepDetail)> {
        let ik = self.key.derive(it as u64);
        // Generator-side readers see the networks as they were at the start
        // of the iteration.
        let phi_snap = self.surrogate.clone();
        let ref_snap = self.reference_denoiser()?;
        let fake_snap = self.fake.clone();

        let policy = self.rollout_policy()?;
        let (traj, groups) = self.rollout_groups(ik, policy.as_ref().unwrap_or(&self.student))?;
        let all_rewards: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.rewards.iter().copied())
            .collect();
        let n = all_rewards.len() as f64;
        let mean_reward = all_rewards.iter().sum::<f64>() / n;
        let std_reward = (all_rewards
            .iter()
            .map(|r| (r - mean_reward).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let degenerate = groups.iter().all(|g| g.degenerate);
        if degenerate {
            log::debug!("iteration {it}: degenerate group, reward updates skipped");
        }

        let mut surrogate_value = 0.0;
        let mut surr_rng = ik.derive_str("surrogate").stream();
        if self.cfg.baseline == Baseline::None && self.cfg.surrogate_mode == SurrogateMode::Dynamic
        {
            if !degenerate {
                if let Some(batch) = self.surrogate_batch(&traj, &groups, &mut surr_rng)? {
                    surrogate_value = surrogate_update(
                        &mut self.surrogate,
                        &mut self.surrogate_adam,
                        &ref_snap,
                        &self.sched,
                        &batch,
                        self.cfg.beta,
                    )?;
                }
            }
            self.reference.update(self.surrogate.params(), it + 1)?;
        }

        let mut fake_rng = ik.derive_str("fake").stream();
        let fake_loss = fake_score_update(
            &mut self.fake,
            &mut self.fake_adam,
            traj.endpoints(),
            &traj.conditions,
            &self.sched,
            self.cfg.fake_weighting,
            &mut fake_rng,
        )?;

        let mut gen_rng = ik.derive_str("generator").stream();
        let levels = self.cfg.generator_levels.candidates(self.student.steps());
        let k = levels[gen_rng.index(levels.len())];
        let kl_level = if self.cfg.kl_levels == self.cfg.generator_levels {
            k
        } else {
            let l = self.cfg.kl_levels.candidates(self.student.steps());
            l[gen_rng.index(l.len())]
        };
        let kl = kl_term_grad(
            &self.student,
            &fake_snap,
            &self.teacher,
            &self.sched,
            &traj,
            kl_level,
            self.cfg.kl_time_window,
            self.cfg.lambda_rule,
            self.cfg.backprop_path,
            &mut gen_rng,
        )?;
        let mut reward_rng = ik.derive_str("reward").stream();
        let reward_grad = if degenerate {
            None
        } else {
            match self.cfg.baseline {
                Baseline::None => Some(
                    reward_term_grad(
                        &self.student,
                        &phi_snap,
                        &ref_snap,
                        &self.sched,
                        &traj,
                        k,
                        &RewardEstimator {
                            beta: self.cfg.beta,
                            form: self.cfg.reward_grad,
                            sampling: self.cfg.time_sampling,
                            draws: self.cfg.reward_draws,
                        },
                        self.cfg.backprop_path,
                        &mut reward_rng,
                    )?
                    .grads,
                ),
                Baseline::DirectRlLoss => {
                    match self.surrogate_batch(&traj, &groups, &mut reward_rng)? {
                        Some(batch) => {
                            let (loss, grads) = surrogate_loss(
                                &self.student.model,
                                &self.pre_rl,
                                &self.sched,
                                &batch,
                                self.cfg.beta,
                                true,
                            )?;
                            surrogate_value = loss;
                            Some(grads.expect("requested").scaled(-1.0))
                        }
                        None => None,
                    }
                }
                Baseline::DistillFromRlTeacher => unreachable!("rejected in R1Trainer::new"),
            }
        };
        let (reward_grad, beta_g) = match reward_grad {
            Some(r) => {
                let b = resolve_beta_g(&r, &kl.grads, self.cfg.beta_g);
                self.beta_g_last = b;
                (r, b)
            }
            None => (
                Grads::zeros_like(self.student.model.params()),
                self.beta_g_last,
            ),
        };
        let mut total = combine_generator_grads(&reward_grad, &kl.grads, beta_g);
        if self.cfg.normalize_generator_grad {
            let n = total.norm();
            if n > 0.0 {
                total = total.scaled(1.0 / n);
            }
        }
        self.student_adam
            .step(self.student.model.params_mut(), &total)?;
        if let Some(ema) = &mut self.rollout_ema {
            ema.update(self.student.model.params())?;
        }
        self.iteration += 1;

        let done = self.iteration;
        if done % self.cfg.eval_every == 0 || done == self.cfg.iterations {
            let e = self.evaluate()?;
            self.last_w2 = e.sliced_w2;
            self.evals.push(EvalRow::new(done, e));
            log::info!(
                "r1 it {done}: eval reward {:.3} sliced_w2 {:.4} region {:.3}",
                e.mean_reward,
                e.sliced_w2,
                e.coarse_region_rate
            );
        }
        let row = MetricsRow {
            iteration: it,
            mean_reward,
            std_reward,
            surrogate_loss: surrogate_value,
            fake_loss,
            reward_term_grad_norm: reward_grad.norm(),
            kl_term_grad_norm: kl.grads.norm(),
            beta_g_effective: beta_g,
            sliced_w2_to_teacher: self.last_w2,
            wall_clock_s: self.elapsed_offset + self.start.elapsed().as_secs_f64(),
        };
        check_row(&row)?;
        let detail = StepDetail {
            trajectories: traj,
            groups,
            level: k,
            reward_grad,
            kl_grad: kl.grads,
            total_grad: total,
        };
        Ok((row, detail))
    }

    /// Run until the iteration budget or reward target is reached, passing
    /// each row to `on_row`.
    pub fn run(&mut self, mut on_row: impl FnMut(&Self, &MetricsRow) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let row = self.step()?;
            on_row(self, &row)?;
        }
        Ok(())
    }

    /// Write every network, optimizer moment and counter under `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let state = TrainerState {
            iteration: self.iteration,
            beta_g_last: self.beta_g_last,
            last_w2: self.last_w2,
            student_adam_step: self.student_adam.step,
            fake_adam_step: self.fake_adam.step,
            surrogate_adam_step: self.surrogate_adam.step,
            evals: self.evals.clone(),
        };
        let clock = ClockState {
            elapsed_s: self.elapsed_offset + self.start.elapsed().as_secs_f64(),
        };
        checkpoint::write_tree_atomic(dir, |d| {
            let stores: Vec<(&str, &ParamStore)> = vec![
                ("student", self.student.model.params()),
                ("student_adam_m", &self.student_adam.m),
                ("student_adam_v", &self.student_adam.v),
                ("fake", self.fake.params()),
                ("fake_adam_m", &self.fake_adam.m),
                ("fake_adam_v", &self.fake_adam.v),
                ("surrogate", self.surrogate.params()),
                ("surrogate_adam_m", &self.surrogate_adam.m),
                ("surrogate_adam_v", &self.surrogate_adam.v),
                ("reference", self.reference.params()),
                ("pre_rl", self.pre_rl.params()),
            ];
            for (name, s) in stores {
                checkpoint::save(s, &d.join(name))?;
            }
            if let Some(ema) = &self.rollout_ema {
                checkpoint::save(&ema.shadow, &d.join("rollout_ema"))?;
            }
            let p = d.join("steps.json");
            std::fs::write(&p, self.student.steps().to_string()).map_err(|e| Error::io(&p, e))?;
            let p = d.join(CLOCK_FILE);
            std::fs::write(&p, serde_json::to_vec_pretty(&clock)?).map_err(|e| Error::io(&p, e))?;
            let p = d.join("state.json");
            std::fs::write(&p, serde_json::to_vec_pretty(&state)?).map_err(|e| Error::io(&p, e))
        })
    }

    /// Restore a trainer written by [`R1Trainer::save_checkpoint`]. The
    /// per-iteration noise streams are derived from the seed and iteration,
    /// so the restored run continues exactly where the saved one stopped.
    pub fn resume(
        cfg: TrainerConfig,
        task: ToyTask,
        sched: NoiseSchedule,
        teacher: Denoiser,
        key: StreamKey,
        dir: &Path,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = dir.join("state.json");
        if !p.exists() {
            return Err(Error::MissingInput {
                what: "trainer checkpoint state".into(),
                path: p,
            });
        }
        let state: TrainerState =
            serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let p = dir.join(CLOCK_FILE);
        let elapsed_s = match std::fs::read(&p) {
            Ok(b) => serde_json::from_slice::<ClockState>(&b)?.elapsed_s,
            Err(_) => 0.0,
        };
        let load = |name: &str| checkpoint::load(&dir.join(name));
        let model = |name: &str| -> Result<Denoiser> { teacher.with_params(load(name)?) };
        let adam = |lr: f64, m: &str, v: &str, step: u64| -> Result<AdamState> {
            Ok(AdamState {
                config: AdamConfig::with_lr(lr),
                m: load(m)?,
                v: load(v)?,
                step,
            })
        };
        let grid = crate::schedule::StepGrid::uniform(sched.t_max(), infer_steps(dir)?)?;
        let student = Student::new(model("student")?, grid);
        let surrogate = model("surrogate")?;
        let mut reference = ReferenceModel::new(surrogate.params(), cfg.reference_mode)?;
        reference.set_params(load("reference")?)?;
        let rollout_ema = match cfg.rollout_policy {
            RolloutPolicy::Current => None,
            RolloutPolicy::Ema { decay } => {
                let mut e = EmaState::new(student.model.params(), decay)?;
                e.shadow = load("rollout_ema")?;
                Some(e)
            }
        };
        let key = key.derive_str("r1");
        let eval_ref = EvalReference::new(
            &teacher,
            &task,
            &sched,
            cfg.eval_samples,
            key.derive_str("eval"),
        )?;
        let initial = state
            .evals
            .first()
            .copied()
            .ok_or_else(|| Error::Format("checkpoint has no evaluations".into()))?;
        Ok(R1Trainer {
            student_adam: adam(
                cfg.lr_student,
                "student_adam_m",
                "student_adam_v",
                state.student_adam_step,
            )?,
            fake_adam: adam(
                cfg.lr_fake,
                "fake_adam_m",
                "fake_adam_v",
                state.fake_adam_step,
            )?,
            surrogate_adam: adam(
                cfg.lr_surrogate,
                "surrogate_adam_m",
                "surrogate_adam_v",
                state.surrogate_adam_step,
            )?,
            pre_rl: model("pre_rl")?,
            fake: model("fake")?,
            cfg,
            task,
            sched,
            teacher,
            student,
            surrogate,
            reference,
            rollout_ema,
            beta_g_last: state.beta_g_last,
            iteration: state.iteration,
            key,
            eval_ref,
            initial_eval: EvalReport {
                mean_reward: initial.mean_reward,
                sliced_w2: initial.sliced_w2,
                coarse_region_rate: initial.coarse_region_rate,
            },
            last_w2: state.last_w2,
            evals: state.evals,
            elapsed_offset: elapsed_s,
            start: Instant::now(),
        })
    }
}

fn infer_steps(dir: &Path) -> Result<usize> {
    let p = dir.join("steps.json");
    if p.exists() {
        return Ok(serde_json::from_slice(
            &std::fs::read(&p).map_err(|e| Error::io(&p, e))?,
        )?);
    }
    Err(Error::MissingInput {
        what: "student step count".into(),
        path: p,
    })
}

fn check_row(row: &MetricsRow) -> Result<()> {
    let vals = [
        row.mean_reward,
        row.std_reward,
        row.surrogate_loss,
        row.fake_loss,
        row.reward_term_grad_norm,
        row.kl_term_grad_norm,
        row.beta_g_effective,
        row.sliced_w2_to_teacher,
    ];
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("metrics row {row:?}")))
    }
}
