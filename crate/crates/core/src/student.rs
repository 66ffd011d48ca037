//! K-step student generator, its fake-score companion, trajectory rollouts
//! and the trajectory distribution-matching update.
//!
//! State index `k` refers to `x_{t_k}` on the student's [`StepGrid`]:
//! `k = K` is the initial noise and `k = 0` the clean endpoint. The network
//! produces states `0..K`, so those are the levels that receive gradients.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{score_from_x0, Denoiser};
use crate::numerics::checkpoint;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::mlp::BoundMlp;
use crate::numerics::optim::AdamState;
use crate::numerics::rng::{NoiseStream, StreamKey};
use crate::numerics::tensor::{Grads, Matrix, ParamStore, Tensor};
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::teacher::{denoising_loss, LossWeight};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Every step is the deterministic update.
    Deterministic,
    /// Every step draws from the Gaussian posterior anchored at the
    /// predicted clean sample.
    Stochastic,
}

/// Which part of the trajectory `∂x_{t_k}/∂θ` differentiates through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackpropPath {
    /// Only the step that produced `x_{t_k}`; earlier states are constants.
    FinalStep,
    /// Every step from `x_T` down to `x_{t_k}`.
    FullPath,
}

/// Per-sample time weighting of the score-difference gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Apply the update in clean-sample space, normalized per sample by
    /// `1/(‖x̂_teacher − x_0‖₁ + δ)` where `x_0` is the trajectory endpoint.
    Normalized { delta: f64 },
    /// `λ_t = 1` on the raw score difference.
    Unit,
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Normalized { delta: 1e-2 }
    }
}

/// `G` trajectories with every state retained.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub conditions: Vec<usize>,
    /// `states[k]` holds `x_{t_k}` for all members, `k = 0..=K`.
    pub states: Vec<Matrix>,
    /// `injected[k]` is the noise added when producing `states[k]`; zero
    /// in deterministic mode.
    pub injected: Vec<Matrix>,
    pub seeds: Vec<u64>,
    pub mode: RolloutMode,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn endpoints(&self) -> &Matrix {
        &self.states[0]
    }

    /// Members `idx` as a batch of their own.
    pub fn select(&self, idx: &[usize]) -> TrajectoryBatch {
        TrajectoryBatch {
            conditions: idx.iter().map(|&i| self.conditions[i]).collect(),
            states: self.states.iter().map(|m| m.select_rows(idx)).collect(),
            injected: self.injected.iter().map(|m| m.select_rows(idx)).collect(),
            seeds: idx.iter().map(|&i| self.seeds[i]).collect(),
            mode: self.mode,
        }
    }

    /// Write states as an f32 checkpoint plus `trace.json` metadata.
    pub fn save_trace(&self, dir: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        for (k, s) in self.states.iter().enumerate() {
            store.insert(format!("state{k}"), s.to_tensor()?)?;
        }
        for (k, s) in self.injected.iter().enumerate() {
            store.insert(format!("injected{k}"), s.to_tensor()?)?;
        }
        checkpoint::save(&store, dir)?;
        let meta = TraceMeta {
            conditions: self.conditions.clone(),
            seeds: self.seeds.clone(),
            mode: self.mode,
        };
        let p = dir.join("trace.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load_trace(dir: &Path) -> Result<Self> {
        let store = checkpoint::load(dir)?;
        let p = dir.join("trace.json");
        let meta: TraceMeta =
            serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let get = |prefix: &str| -> Vec<Matrix> {
            (0..)
                .map_while(|k| {
                    store
                        .get(&format!("{prefix}{k}"))
                        .ok()
                        .map(Tensor::to_matrix)
                })
                .collect()
        };
        Ok(TrajectoryBatch {
            conditions: meta.conditions,
            states: get("state"),
            injected: get("injected"),
            seeds: meta.seeds,
            mode: meta.mode,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    conditions: Vec<usize>,
    seeds: Vec<u64>,
    mode: RolloutMode,
}

/// Few-step generator: a clean-sample predictor driven over a step grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub model: Denoiser,
    grid: StepGrid,
}

impl Student {
    pub fn new(model: Denoiser, grid: StepGrid) -> Self {
        Student { model, grid }
    }

    pub fn grid(&self) -> &StepGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    fn check_level(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::invalid(format!(
                "state index {k} is not produced by the generator (K = {})",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Posterior std of the stochastic step into state `k`.
    pub fn stochastic_eta(&self, sched: &NoiseSchedule, k: usize) -> Result<f64> {
        sched.eta(self.grid.knot(k + 1), self.grid.knot(k), 0)
    }

    /// Mean coefficients `(c_x0, c_xt)` of the step into state `k`.
    fn step_coefficients(
        &self,
        sched: &NoiseSchedule,
        k: usize,
        mode: RolloutMode,
    ) -> Result<(f64, f64)> {
        let (t, s) = (self.grid.knot(k + 1), self.grid.knot(k));
        match mode {
            RolloutMode::Deterministic => sched.ddim_coefficients(t, s),
            RolloutMode::Stochastic => {
                let eta = self.stochastic_eta(sched, k)?;
                sched.posterior_coefficients(t, s, 0, eta)
            }
        }
    }

    /// The step `x_{t_{k+1}} → x_{t_k}` on a graph, excluding injected noise.
    #[allow(clippy::too_many_arguments)]
    pub fn step_on(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        sched: &NoiseSchedule,
        x_prev: Var,
        k: usize,
        c: &[usize],
        mode: RolloutMode,
    ) -> Result<Var> {
        self.check_level(k)?;
        let rows = c.len();
        let t = self.grid.knot(k + 1);
        let x0 = self
            .model
            .predict_on(g, bound, sched, x_prev, &vec![t; rows], c)?;
        let (a, b) = self.step_coefficients(sched, k, mode)?;
        g.lincomb_rows(x0, vec![a; rows], x_prev, vec![b; rows])
    }

    /// One step without gradient tracking; noise is drawn per row from
    /// `streams` in stochastic mode. Returns `(x_{t_k}, injected)`.
    fn step_values(
        &self,
        sched: &NoiseSchedule,
        x_prev: &Matrix,
        k: usize,
        c: &[usize],
        mode: RolloutMode,
        streams: &mut [NoiseStream],
    ) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false);
        let xp = g.constant(x_prev.clone());
        let out = self.step_on(&mut g, &bound, sched, xp, k, c, mode)?;
        let mut x = g.value(out).clone();
        let mut injected = Matrix::zeros(x.rows, x.cols);
        if mode == RolloutMode::Stochastic {
            let eta = self.stochastic_eta(sched, k)?;
            for (r, s) in streams.iter_mut().enumerate() {
                for (inj, v) in injected
                    .row_mut(r)
                    .iter_mut()
                    .zip(x.data[r * x.cols..].iter_mut())
                {
                    *inj = f64::from((eta * s.normal()) as f32);
                    *v += *inj;
                }
            }
        }
        Ok((x.round_to_f32(), injected))
    }

    /// Recompute state `k` from the stored state `k + 1` (deterministic
    /// trajectories), rounded like the stored value.
    pub fn replay_step(
        &self,
        sched: &NoiseSchedule,
        traj: &TrajectoryBatch,
        k: usize,
    ) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false);
        let xp = g.constant(traj.states[k + 1].clone());
        let out = self.step_on(&mut g, &bound, sched, xp, k, &traj.conditions, traj.mode)?;
        let mut x = g.value(out).clone();
        for (v, n) in x.data.iter_mut().zip(&traj.injected[k].data) {
            *v += n;
        }
        Ok(x.round_to_f32())
    }

    /// `G = c.len()` trajectories; member `i` draws all of its noise from
    /// `key.derive(i)`.
    pub fn rollout(
        &self,
        sched: &NoiseSchedule,
        c: &[usize],
        mode: RolloutMode,
        key: StreamKey,
    ) -> Result<TrajectoryBatch> {
        if c.is_empty() {
            return Err(Error::invalid("rollout of an empty group"));
        }
        let dim = self.model.x_dim();
        let seeds: Vec<u64> = (0..c.len()).map(|i| key.derive(i as u64).raw()).collect();
        let mut streams: Vec<NoiseStream> =
            seeds.iter().map(|&s| NoiseStream::from_seed(s)).collect();
        let mut x_big_t = Matrix::zeros(c.len(), dim);
        for (r, s) in streams.iter_mut().enumerate() {
            for v in x_big_t.row_mut(r) {
                *v = s.normal();
            }
        }
        let k_max = self.steps();
        let mut states = vec![Matrix::zeros(0, 0); k_max + 1];
        let mut injected = vec![Matrix::zeros(c.len(), dim); k_max];
        states[k_max] = x_big_t.round_to_f32();
        for k in (0..k_max).rev() {
            let (x, inj) = self.step_values(sched, &states[k + 1], k, c, mode, &mut streams)?;
            states[k] = x;
            injected[k] = inj;
        }
        Ok(TrajectoryBatch {
            conditions: c.to_vec(),
            states,
            injected,
            seeds,
            mode,
        })
    }

    /// Endpoints of fresh deterministic rollouts.
    pub fn sample(&self, sched: &NoiseSchedule, c: &[usize], key: StreamKey) -> Result<Matrix> {
        Ok(self
            .rollout(sched, c, RolloutMode::Deterministic, key)?
            .states
            .swap_remove(0))
    }

    /// Run the remaining steps from state `k` to the endpoint, rounding each
    /// state like a rollout does. Stochastic steps draw from `noise` in
    /// row-major order.
    pub fn complete(
        &self,
        sched: &NoiseSchedule,
        x_tk: &Matrix,
        k: usize,
        c: &[usize],
        mode: RolloutMode,
        noise: &mut NoiseStream,
    ) -> Result<Matrix> {
        if k > self.steps() {
            return Err(Error::invalid(format!(
                "state index {k} beyond K = {}",
                self.steps()
            )));
        }
        let mut x = x_tk.clone();
        for j in (0..k).rev() {
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, false);
            let xp = g.constant(x);
            let out = self.step_on(&mut g, &bound, sched, xp, j, c, mode)?;
            x = g.value(out).clone();
            if mode == RolloutMode::Stochastic {
                let eta = self.stochastic_eta(sched, j)?;
                for v in &mut x.data {
                    *v += eta * noise.normal();
                }
            }
            x = x.round_to_f32();
        }
        Ok(x)
    }

    /// `x_{t_k}(θ)` on a graph with trainable parameters, following `path`.
    pub fn generate_on(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        sched: &NoiseSchedule,
        traj: &TrajectoryBatch,
        k: usize,
        path: BackpropPath,
    ) -> Result<Var> {
        self.check_level(k)?;
        let start = match path {
            BackpropPath::FinalStep => k + 1,
            BackpropPath::FullPath => self.steps(),
        };
        let mut x = g.constant(traj.states[start].clone());
        for j in (k..start).rev() {
            let y = self.step_on(g, bound, sched, x, j, &traj.conditions, traj.mode)?;
            let inj = g.constant(traj.injected[j].clone());
            x = g.add(y, inj)?;
        }
        Ok(x)
    }

    /// Gradient of `Σ_i ⟨v_i, x_{t_k,i}(θ)⟩ / G` with `v` held constant.
    pub fn pullback(
        &self,
        sched: &NoiseSchedule,
        traj: &TrajectoryBatch,
        k: usize,
        v: &Matrix,
        path: BackpropPath,
    ) -> Result<Grads> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let x = self.generate_on(&mut g, &bound, sched, traj, k, path)?;
        let vc = g.constant(v.clone());
        let prod = g.mul(x, vc)?;
        let s = g.sum(prod);
        let s = g.scale(s, 1.0 / traj.len() as f64);
        self.model.grads(&g, &bound, s)
    }
}

/// Pieces of the score-difference term for one trajectory level.
#[derive(Clone, Debug)]
pub struct KlTerm {
    pub t: Vec<usize>,
    pub x_t: Matrix,
    /// `s_fake(x_t) − s_teacher(x_t)`.
    pub score_diff: Matrix,
    /// Per-row `λ_t`; infinite where `α_t = 0` under the normalized rule,
    /// in which case `grad_xtk` is formed in clean-sample space directly.
    pub lambda: Vec<f64>,
    /// `λ_t·(s_fake − s_teacher)·α_{t|t_k}` per row.
    pub grad_xtk: Matrix,
    /// Parameter gradient of the pulled-back surrogate.
    pub grads: Grads,
}

/// Score-difference gradient for state `k` of `traj`:
/// `E λ_t (s_fake(x_t) − s_teacher(x_t)) ∂x_t/∂θ`, `t ~ U(t_k, T]`, or
/// `t ~ U(t_k, t_k + w]` with a `window` of `w` steps.
#[allow(clippy::too_many_arguments)]
pub fn kl_term_grad(
    student: &Student,
    fake: &Denoiser,
    teacher: &Denoiser,
    sched: &NoiseSchedule,
    traj: &TrajectoryBatch,
    k: usize,
    window: Option<usize>,
    rule: LambdaRule,
    path: BackpropPath,
    noise: &mut NoiseStream,
) -> Result<KlTerm> {
    student.check_level(k)?;
    let t_k = student.grid().knot(k);
    let x_tk = &traj.states[k];
    let rows = traj.len();
    let hi = window.map_or(sched.t_max(), |w| (t_k + w.max(1)).min(sched.t_max()));
    let t: Vec<usize> = (0..rows)
        .map(|_| noise.int_inclusive(t_k + 1, hi))
        .collect();
    let kernels = t
        .iter()
        .map(|&ti| sched.transition(t_k, ti))
        .collect::<Result<Vec<_>>>()?;
    let (x_t, _) = crate::schedule::diffuse_rows(x_tk, &kernels, noise)?;
    let c = &traj.conditions;
    let x0_fake = fake.predict(sched, &x_t, &t, c)?;
    let x0_teacher = teacher.predict(sched, &x_t, &t, c)?;
    let s_fake = score_from_x0(sched, &x_t, &x0_fake, &t)?;
    let s_teacher = score_from_x0(sched, &x_t, &x0_teacher, &t)?;
    let mut score_diff = s_fake;
    for (a, b) in score_diff.data.iter_mut().zip(&s_teacher.data) {
        *a -= b;
    }
    let endpoint = traj.endpoints();
    let mut lambda = Vec::with_capacity(rows);
    let mut grad_xtk = Matrix::zeros(rows, x_tk.cols);
    for r in 0..rows {
        let a_t = sched.alpha(t[r]);
        let s_t = sched.sigma(t[r]);
        let chain = kernels[r].alpha;
        match rule {
            LambdaRule::Unit => {
                lambda.push(1.0);
                for (o, &d) in grad_xtk.row_mut(r).iter_mut().zip(score_diff.row(r)) {
                    *o = d * chain;
                }
            }
            LambdaRule::Normalized { delta } => {
                let l1: f64 = x0_teacher
                    .row(r)
                    .iter()
                    .zip(endpoint.row(r))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                let n = 1.0 / (l1 + delta);
                lambda.push(if a_t > 0.0 {
                    n * s_t * s_t / a_t
                } else {
                    f64::INFINITY
                });
                for ((o, &f), &p) in grad_xtk
                    .row_mut(r)
                    .iter_mut()
                    .zip(x0_fake.row(r))
                    .zip(x0_teacher.row(r))
                {
                    *o = n * (f - p) * chain;
                }
            }
        }
    }
    let grads = student.pullback(sched, traj, k, &grad_xtk, path)?;
    Ok(KlTerm {
        t,
        x_t,
        score_diff,
        lambda,
        grad_xtk,
        grads,
    })
}

/// One distribution-matching step on the student. Returns the applied
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn tdm_update(
    student: &mut Student,
    adam: &mut AdamState,
    fake: &Denoiser,
    teacher: &Denoiser,
    sched: &NoiseSchedule,
    traj: &TrajectoryBatch,
    k: usize,
    rule: LambdaRule,
    path: BackpropPath,
    noise: &mut NoiseStream,
) -> Result<Grads> {
    let term = kl_term_grad(
        student, fake, teacher, sched, traj, k, None, rule, path, noise,
    )?;
    adam.step(student.model.params_mut(), &term.grads)?;
    Ok(term.grads)
}

/// One denoising step of the fake score on detached student samples.
pub fn fake_score_update(
    fake: &mut Denoiser,
    adam: &mut AdamState,
    samples: &Matrix,
    c: &[usize],
    sched: &NoiseSchedule,
    weight: LossWeight,
    noise: &mut NoiseStream,
) -> Result<f64> {
    let (loss, grads) = denoising_loss(fake, sched, samples, c, weight, noise)?;
    adam.step(fake.params_mut(), &grads)?;
    Ok(loss)
}
