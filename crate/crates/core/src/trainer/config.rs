//! Trainer and distillation settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardKind;
use crate::student::{BackpropPath, LambdaRule, RolloutMode};
use crate::surrogate::{ReferenceMode, TimeSampling};
use crate::teacher::LossWeight;

/// How the KL-term weight `β_g` is chosen each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BetaGRule {
    /// `β_g = ratio·‖reward_grad‖ / max(‖kl_grad‖, 1e-12)`.
    NormRatio {
        ratio: f64,
    },
    Fixed {
        value: f64,
    },
}

impl Default for BetaGRule {
    fn default() -> Self {
        BetaGRule::NormRatio { ratio: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SurrogateMode {
    /// `φ` is updated every iteration on fresh groups.
    #[default]
    Dynamic,
    /// `φ` is fit for `iterations` steps against the frozen distilled
    /// student, then held fixed together with its reference.
    FrozenPretrained { iterations: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Apply the group loss to the student's own denoiser instead of
    /// training a surrogate.
    DirectRlLoss,
    /// Reinforce a many-step policy first, then distill from it.
    DistillFromRlTeacher,
}

/// Which input-gradient form drives the reward term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardGradForm {
    /// Average the log-ratio over `x_{t−1} ~ q` in closed form, which gives
    /// `−ΔKL(x_t, x_{t_k})`, and differentiate through `x_t(x_{t_k})` and the
    /// posterior mean.
    #[default]
    ExpectedLogRatio,
    /// Differentiate the log-ratio through both `x_t` and `x_{t−1}` as
    /// reparameterized functions of `x_{t_k}`.
    Reparameterized,
    /// Differentiate through `x_t` only, with `x_{t−1}` held fixed, and
    /// chain by `α_{t|t_k}`.
    ConditioningOnly,
}

/// Trajectory levels the generator update samples `k` from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLevels {
    /// Every student output `k ∈ {0, …, K−1}`.
    All,
    /// Intermediate states only, `k ∈ {1, …, K−1}`; falls back to `{0}`
    /// when `K = 1`.
    #[default]
    Intermediate,
}

impl GeneratorLevels {
    pub fn candidates(self, steps: usize) -> Vec<usize> {
        match self {
            GeneratorLevels::Intermediate if steps > 1 => (1..steps).collect(),
            _ => (0..steps).collect(),
        }
    }
}

/// Policy that generates each iteration's groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum RolloutPolicy {
    /// The live student.
    #[default]
    Current,
    /// An exponential moving average of the student.
    Ema { decay: f64 },
}

/// Settings of the many-step policy used by the distill-from-RL baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlTeacherConfig {
    pub steps: usize,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for RlTeacherConfig {
    fn default() -> Self {
        RlTeacherConfig {
            steps: 16,
            iterations: 500,
            lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Members per group `G`.
    pub group_size: usize,
    /// Groups (each with its own condition) per iteration.
    pub conditions_per_iteration: usize,
    /// Surrogate temperature `β`.
    pub beta: f64,
    pub beta_g: BetaGRule,
    pub iterations: usize,
    pub lr_student: f64,
    pub lr_surrogate: f64,
    pub lr_fake: f64,
    /// Time weighting of the fake score's denoising loss.
    pub fake_weighting: LossWeight,
    pub reward: RewardKind,
    pub rollout_mode: RolloutMode,
    pub rollout_policy: RolloutPolicy,
    pub surrogate_mode: SurrogateMode,
    pub reference_mode: ReferenceMode,
    pub baseline: Baseline,
    /// `(t, x_t)` draws per member in each surrogate-loss evaluation.
    pub surrogate_draws: usize,
    /// Timestep distribution for surrogate-loss and reward-term draws.
    pub time_sampling: TimeSampling,
    pub reward_grad: RewardGradForm,
    /// `(t, ε, z)` draws averaged per member in the reward term.
    pub reward_draws: usize,
    pub lambda_rule: LambdaRule,
    pub backprop_path: BackpropPath,
    /// Levels the reward term samples `k` from.
    pub generator_levels: GeneratorLevels,
    /// Levels the distribution-matching term samples its own `k` from.
    pub kl_levels: GeneratorLevels,
    /// Largest `t − t_k` the distribution-matching term draws; `None` uses
    /// the whole range up to `T`.
    pub kl_time_window: Option<usize>,
    /// Rescale the combined generator gradient to unit norm before the
    /// optimizer step.
    pub normalize_generator_grad: bool,
    /// Evaluation period in iterations.
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Checkpoint period in iterations; `None` writes only the final one.
    pub save_every: Option<usize>,
    /// Stop once an evaluation reaches this mean reward.
    pub stop_at_reward: Option<f64>,
    pub rl_teacher: RlTeacherConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 24,
            conditions_per_iteration: 1,
            beta: 100.0,
            beta_g: BetaGRule::NormRatio { ratio: 0.5 },
            iterations: 2000,
            lr_student: 7e-5,
            lr_surrogate: 1e-4,
            lr_fake: 1e-3,
            fake_weighting: LossWeight::UnitTarget,
            reward: RewardKind::Sector,
            rollout_mode: RolloutMode::Deterministic,
            rollout_policy: RolloutPolicy::default(),
            surrogate_mode: SurrogateMode::default(),
            reference_mode: ReferenceMode::Ema { decay: 0.999 },
            baseline: Baseline::default(),
            surrogate_draws: 1,
            time_sampling: TimeSampling::default(),
            reward_grad: RewardGradForm::default(),
            reward_draws: 4,
            lambda_rule: LambdaRule::default(),
            backprop_path: BackpropPath::FinalStep,
            generator_levels: GeneratorLevels::default(),
            kl_levels: GeneratorLevels::All,
            kl_time_window: Some(200),
            normalize_generator_grad: true,
            eval_every: 25,
            eval_samples: 2048,
            save_every: None,
            stop_at_reward: None,
            rl_teacher: RlTeacherConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.group_size < 2 {
            problems.push(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.conditions_per_iteration == 0 {
            problems.push("conditions_per_iteration must be >= 1".into());
        }
        if self.iterations == 0 {
            problems.push("iterations must be >= 1".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            problems.push(format!("beta must be positive, got {}", self.beta));
        }
        match self.beta_g {
            BetaGRule::NormRatio { ratio } if !(ratio >= 0.0 && ratio.is_finite()) => {
                problems.push(format!("beta_g ratio must be >= 0, got {ratio}"))
            }
            BetaGRule::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                problems.push(format!("beta_g value must be >= 0, got {value}"))
            }
            _ => {}
        }
        for (name, lr) in [
            ("lr_student", self.lr_student),
            ("lr_surrogate", self.lr_surrogate),
            ("lr_fake", self.lr_fake),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                problems.push(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.reward == RewardKind::TextEdit {
            problems.push("reward text_edit cannot score 2-D samples".into());
        }
        if let RolloutPolicy::Ema { decay } = self.rollout_policy {
            if !(0.0..=1.0).contains(&decay) {
                problems.push(format!("rollout ema decay must lie in [0, 1], got {decay}"));
            }
        }
        if let ReferenceMode::Ema { decay } = self.reference_mode {
            if !(0.0..=1.0).contains(&decay) {
                problems.push(format!(
                    "reference ema decay must lie in [0, 1], got {decay}"
                ));
            }
        }
        if let ReferenceMode::Periodic { period: 0 } = self.reference_mode {
            problems.push("reference period must be >= 1".into());
        }
        if self.surrogate_draws == 0 {
            problems.push("surrogate_draws must be >= 1".into());
        }
        if self.reward_draws == 0 {
            problems.push("reward_draws must be >= 1".into());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be >= 1".into());
        }
        if self.eval_samples < 512 {
            problems.push(format!(
                "eval_samples must be >= 512, got {}",
                self.eval_samples
            ));
        }
        if self.save_every == Some(0) {
            problems.push("save_every must be >= 1 when set".into());
        }
        if self.baseline == Baseline::DistillFromRlTeacher && self.rl_teacher.steps == 0 {
            problems.push("rl_teacher.steps must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Student steps `K`.
    pub steps: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_student: f64,
    pub lr_fake: f64,
    /// Fake-score updates per student update.
    pub fake_updates: usize,
    pub fake_weighting: LossWeight,
    pub lambda_rule: LambdaRule,
    pub backprop_path: BackpropPath,
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 4,
            iterations: 4000,
            batch_size: 128,
            lr_student: 1e-4,
            lr_fake: 1e-3,
            fake_updates: 1,
            fake_weighting: LossWeight::UnitTarget,
            lambda_rule: LambdaRule::default(),
            backprop_path: BackpropPath::FinalStep,
            eval_every: 200,
            eval_samples: 512,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("distill steps must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push("distill batch_size must be >= 2".into());
        }
        if self.eval_every == 0 || self.eval_samples == 0 {
            problems.push("distill eval_every and eval_samples must be >= 1".into());
        }
        if !(self.lr_student > 0.0 && self.lr_fake > 0.0) {
            problems.push("distill learning rates must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
