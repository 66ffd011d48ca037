//! Diffusion-parameterized surrogate reward.
//!
//! A surrogate network `φ` and a reference network define Gaussian one-step
//! transitions `p(x_{t−1} | x_t)` that share the posterior variance `η_t²`.
//! Their per-step KL gap to the trajectory posterior `q(x_{t−1} | x_t, x_{t_k})`
//! drives a group Bradley-Terry loss: members with positive advantage should
//! be explained better by `φ` than by the reference, members with negative
//! advantage worse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::numerics::graph::Graph;
use crate::numerics::optim::{AdamState, EmaState};
use crate::numerics::rng::NoiseStream;
use crate::numerics::tensor::{Grads, Matrix, ParamStore};
use crate::rewards::RewardGroup;
use crate::schedule::{diffuse_rows, NoiseSchedule, StepGrid};
use crate::student::TrajectoryBatch;

/// Tolerance on `Σ_{G⁺} w − Σ_{G⁻} w` for a group to enter the loss.
pub const WEIGHT_BALANCE_TOL: f64 = 1e-9;

/// Mean coefficients `(a, b)` of the model transition
/// `μ = α_{t−1}·x̂0 + sqrt(σ_{t−1}² − η²)·(x_t − α_t·x̂0)/σ_t = a·x̂0 + b·x_t`.
pub fn model_mean_coefficients(sched: &NoiseSchedule, t: usize, eta: f64) -> Result<(f64, f64)> {
    // The model step is the posterior anchored at the clean prediction.
    sched.posterior_coefficients(t, t - 1, 0, eta)
}

/// Per-row model means for predictions `x0` at timesteps `t`.
pub fn model_means(
    sched: &NoiseSchedule,
    x_t: &Matrix,
    x0: &Matrix,
    t: &[usize],
    eta: &[f64],
) -> Result<Matrix> {
    let mut out = Matrix::zeros(x_t.rows, x_t.cols);
    for r in 0..x_t.rows {
        let (a, b) = model_mean_coefficients(sched, t[r], eta[r])?;
        for c in 0..x_t.cols {
            out.data[r * x_t.cols + c] = a * x0.get(r, c) + b * x_t.get(r, c);
        }
    }
    Ok(out)
}

/// Per-row posterior means of `q(x_{t−1} | x_t, x_{t_k})`.
pub fn posterior_means(
    sched: &NoiseSchedule,
    x_t: &Matrix,
    x_tk: &Matrix,
    t: &[usize],
    t_k: &[usize],
    eta: &[f64],
) -> Result<Matrix> {
    let mut out = Matrix::zeros(x_t.rows, x_t.cols);
    for r in 0..x_t.rows {
        let (a, b) = sched.posterior_coefficients(t[r], t[r] - 1, t_k[r], eta[r])?;
        for c in 0..x_t.cols {
            out.data[r * x_t.cols + c] = a * x_tk.get(r, c) + b * x_t.get(r, c);
        }
    }
    Ok(out)
}

/// Log-density of `N(mean, std²·I)` at each row of `x`.
pub fn gaussian_log_density(x: &Matrix, mean: &Matrix, std: &[f64]) -> Vec<f64> {
    let d = x.cols as f64;
    (0..x.rows)
        .map(|r| {
            let sq: f64 = x
                .row(r)
                .iter()
                .zip(mean.row(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            -sq / (2.0 * std[r] * std[r]) - d * (std[r] * (2.0 * std::f64::consts::PI).sqrt()).ln()
        })
        .collect()
}

fn row_sq_dist(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows)
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y).powi(2))
                .sum()
        })
        .collect()
}

/// `KL(q‖p_φ) − KL(q‖p_ref)` per row from clean predictions of both models:
/// `(‖μ_q − μ_φ‖² − ‖μ_q − μ_ref‖²)/(2η²)`.
#[allow(clippy::too_many_arguments)]
pub fn delta_kl_from_predictions(
    sched: &NoiseSchedule,
    x_t: &Matrix,
    x_tk: &Matrix,
    t: &[usize],
    t_k: &[usize],
    eta: &[f64],
    x0_phi: &Matrix,
    x0_ref: &Matrix,
) -> Result<Vec<f64>> {
    if let Some(r) = eta.iter().position(|&e| !(e > 0.0)) {
        return Err(Error::invalid(format!(
            "ΔKL undefined for η = {} (row {r})",
            eta[r]
        )));
    }
    let mu_q = posterior_means(sched, x_t, x_tk, t, t_k, eta)?;
    let mu_phi = model_means(sched, x_t, x0_phi, t, eta)?;
    let mu_ref = model_means(sched, x_t, x0_ref, t, eta)?;
    let dp = row_sq_dist(&mu_q, &mu_phi);
    let dr = row_sq_dist(&mu_q, &mu_ref);
    Ok((0..x_t.rows)
        .map(|r| (dp[r] - dr[r]) / (2.0 * eta[r] * eta[r]))
        .collect())
}

/// ΔKL per row for the networks `phi` and `reference`.
#[allow(clippy::too_many_arguments)]
pub fn delta_kl(
    phi: &Denoiser,
    reference: &Denoiser,
    sched: &NoiseSchedule,
    x_t: &Matrix,
    x_tk: &Matrix,
    t: &[usize],
    t_k: &[usize],
    c: &[usize],
    eta: &[f64],
) -> Result<Vec<f64>> {
    let x0_phi = phi.predict(sched, x_t, t, c)?;
    let x0_ref = reference.predict(sched, x_t, t, c)?;
    delta_kl_from_predictions(sched, x_t, x_tk, t, t_k, eta, &x0_phi, &x0_ref)
}

/// Distribution of the one-step timestep `t` over `[t_k + 2, T]`, the
/// smallest range with `η_t > 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
    /// `p(t) ∝ a_t²σ_t²/η_t²`: the ΔKL scale per unit change of `x̂0`, times
    /// the `σ_t²` scale of denoiser differences. Each draw carries weight
    /// `1/(N·p(t))` so expectations match the uniform draw over the `N`
    /// admissible steps.
    #[default]
    Importance,
}

impl TimeSampling {
    /// `n` draws of `(t, weight)` for level `t_k`.
    pub fn sample(
        self,
        sched: &NoiseSchedule,
        t_k: usize,
        n: usize,
        noise: &mut NoiseStream,
    ) -> Result<Vec<(usize, f64)>> {
        let lo = t_k + 2;
        let hi = sched.t_max();
        if lo > hi {
            return Err(Error::invalid(format!(
                "t_k = {t_k} leaves no room for t > t_k + 1"
            )));
        }
        match self {
            TimeSampling::Uniform => {
                Ok((0..n).map(|_| (noise.int_inclusive(lo, hi), 1.0)).collect())
            }
            TimeSampling::Importance => {
                let scale = (lo..=hi)
                    .map(|t| {
                        let eta = sched.posterior_eta(t, t_k)?;
                        let (a, _) = model_mean_coefficients(sched, t, eta)?;
                        let s = sched.sigma(t);
                        Ok(a * a * s * s / (eta * eta))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let total: f64 = scale.iter().sum();
                let steps = scale.len() as f64;
                let mut cdf = Vec::with_capacity(scale.len());
                let mut acc = 0.0;
                for s in &scale {
                    acc += s / total;
                    cdf.push(acc);
                }
                Ok((0..n)
                    .map(|_| {
                        let u = noise.uniform();
                        let i = cdf.partition_point(|&c| c < u).min(scale.len() - 1);
                        (lo + i, total / (steps * scale[i]))
                    })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ReferenceMode {
    /// Exponential moving average of `φ`.
    Ema { decay: f64 },
    /// Fixed at initialization.
    Frozen,
    /// Copy of `φ` taken whenever the iteration is a multiple of `period`.
    Periodic { period: usize },
}

impl Default for ReferenceMode {
    fn default() -> Self {
        ReferenceMode::Ema { decay: 0.995 }
    }
}

/// Reference network parameters and their update rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceModel {
    mode: ReferenceMode,
    ema: EmaState,
}

impl ReferenceModel {
    pub fn new(initial: &ParamStore, mode: ReferenceMode) -> Result<Self> {
        let decay = match mode {
            ReferenceMode::Ema { decay } => decay,
            ReferenceMode::Frozen => 1.0,
            ReferenceMode::Periodic { period } => {
                if period == 0 {
                    return Err(Error::Config("periodic reference needs period >= 1".into()));
                }
                1.0
            }
        };
        Ok(ReferenceModel {
            mode,
            ema: EmaState::new(initial, decay)?,
        })
    }

    pub fn mode(&self) -> ReferenceMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.ema.shadow
    }

    pub fn set_params(&mut self, p: ParamStore) -> Result<()> {
        self.ema.shadow.check_same_layout(&p, "reference params")?;
        self.ema.shadow = p;
        Ok(())
    }

    pub fn update(&mut self, phi: &ParamStore, iteration: usize) -> Result<()> {
        match self.mode {
            ReferenceMode::Ema { .. } => self.ema.update(phi),
            ReferenceMode::Frozen => Ok(()),
            ReferenceMode::Periodic { period } => {
                if iteration % period == 0 {
                    self.set_params(phi.clone())?;
                }
                Ok(())
            }
        }
    }
}

/// Flattened surrogate-loss inputs: one row per (group, level, member, draw).
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateBatch {
    pub x_tk: Matrix,
    pub x_t: Matrix,
    pub t: Vec<usize>,
    pub t_k: Vec<usize>,
    pub eta: Vec<f64>,
    pub c: Vec<usize>,
    /// Signed weight `A_i / m` of the member a row belongs to.
    pub weight: Vec<f64>,
    /// Importance weight of the row's timestep draw.
    pub time_weight: Vec<f64>,
    /// Index into `block_t_k` of each row.
    pub block: Vec<usize>,
    /// `t_k` for each (group, level) block.
    pub block_t_k: Vec<usize>,
}

impl SurrogateBatch {
    pub fn rows(&self) -> usize {
        self.t.len()
    }

    pub fn blocks(&self) -> usize {
        self.block_t_k.len()
    }

    /// Block membership as a `blocks × rows` 0/1 matrix.
    fn indicator(&self) -> Matrix {
        let mut m = Matrix::zeros(self.blocks(), self.rows());
        for (r, &b) in self.block.iter().enumerate() {
            m.data[b * self.rows() + r] = 1.0;
        }
        m
    }
}

/// One rollout group with its rewards.
#[derive(Clone, Copy, Debug)]
pub struct GroupRef<'a> {
    pub traj: &'a TrajectoryBatch,
    pub rewards: &'a RewardGroup,
}

/// Assemble loss inputs for every non-degenerate group at each of `levels`,
/// with `draws` independent `(t, x_t)` draws per member.
pub fn sample_surrogate_batch(
    groups: &[GroupRef<'_>],
    levels: &[usize],
    grid: &StepGrid,
    sched: &NoiseSchedule,
    draws: usize,
    sampling: TimeSampling,
    noise: &mut NoiseStream,
) -> Result<Option<SurrogateBatch>> {
    if draws == 0 {
        return Err(Error::Config(
            "surrogate draws per member must be >= 1".into(),
        ));
    }
    let mut xs = Vec::new();
    let mut t = Vec::new();
    let mut t_k = Vec::new();
    let mut c = Vec::new();
    let mut weight = Vec::new();
    let mut time_weight = Vec::new();
    let mut block = Vec::new();
    let mut block_t_k = Vec::new();
    for gr in groups {
        if gr.rewards.degenerate {
            continue;
        }
        if gr.rewards.len() != gr.traj.len() {
            return Err(Error::invalid("reward group and trajectory sizes differ"));
        }
        let imbalance = gr.rewards.weight_imbalance();
        if imbalance.abs() > WEIGHT_BALANCE_TOL {
            return Err(Error::invalid(format!(
                "group weights do not cancel: Σ⁺w − Σ⁻w = {imbalance:e}"
            )));
        }
        let signed = gr.rewards.signed_weights();
        for &k in levels {
            let tk = grid.knot(k);
            let b = block_t_k.len();
            block_t_k.push(tk);
            let times = sampling.sample(sched, tk, gr.traj.len() * draws, noise)?;
            for i in 0..gr.traj.len() {
                for &(ti, wi) in &times[i * draws..(i + 1) * draws] {
                    xs.push(gr.traj.states[k].row(i).to_vec());
                    t.push(ti);
                    time_weight.push(wi);
                    t_k.push(tk);
                    c.push(gr.traj.conditions[i]);
                    weight.push(signed[i] / draws as f64);
                    block.push(b);
                }
            }
        }
    }
    if block_t_k.is_empty() {
        return Ok(None);
    }
    let x_tk = Matrix::from_rows(&xs)?;
    let kernels = t
        .iter()
        .zip(&t_k)
        .map(|(&ti, &tki)| sched.transition(tki, ti))
        .collect::<Result<Vec<_>>>()?;
    let (x_t, _) = diffuse_rows(&x_tk, &kernels, noise)?;
    let eta = t
        .iter()
        .zip(&t_k)
        .map(|(&ti, &tki)| sched.posterior_eta(ti, tki))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(SurrogateBatch {
        x_tk,
        x_t,
        t,
        t_k,
        eta,
        c,
        weight,
        time_weight,
        block,
        block_t_k,
    }))
}

/// Value (and optionally `φ`-gradient) of the surrogate loss
/// `mean_blocks softplus(β·(T − t_k)·Σ_i A_i·ΔKL_i)`,
/// i.e. `−log σ(−β(T − t_k)·[Σ_{G⁺} w·ΔKL − Σ_{G⁻} w·ΔKL])`.
pub fn surrogate_loss(
    phi: &Denoiser,
    reference: &Denoiser,
    sched: &NoiseSchedule,
    batch: &SurrogateBatch,
    beta: f64,
    with_grads: bool,
) -> Result<(f64, Option<Grads>)> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!(
            "surrogate β must be positive, got {beta}"
        )));
    }
    let n = batch.rows();
    let mu_q = posterior_means(
        sched,
        &batch.x_t,
        &batch.x_tk,
        &batch.t,
        &batch.t_k,
        &batch.eta,
    )?;
    let x0_ref = reference.predict(sched, &batch.x_t, &batch.t, &batch.c)?;
    let mu_ref = model_means(sched, &batch.x_t, &x0_ref, &batch.t, &batch.eta)?;
    let d_ref = row_sq_dist(&mu_q, &mu_ref);

    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for r in 0..n {
        let (ar, br) = model_mean_coefficients(sched, batch.t[r], batch.eta[r])?;
        a.push(ar);
        b.push(br);
    }
    let mut g = Graph::new();
    let bound = phi.bind(&mut g, with_grads);
    let xt = g.constant(batch.x_t.clone());
    let x0 = phi.predict_on(&mut g, &bound, sched, xt, &batch.t, &batch.c)?;
    let mu_phi = g.lincomb_rows(x0, a, xt, b)?;
    let mq = g.constant(mu_q);
    let diff = g.sub(mq, mu_phi)?;
    let sq = g.square(diff);
    let d_phi = g.sum_cols(sq);
    let d_ref = g.constant(Matrix::new(n, 1, d_ref)?);
    let gap = g.sub(d_phi, d_ref)?;
    let scale: Vec<f64> = (0..n)
        .map(|r| batch.weight[r] * batch.time_weight[r] / (2.0 * batch.eta[r] * batch.eta[r]))
        .collect();
    let weighted = g.scale_rows(gap, scale)?;
    let per_block = g.const_matmul(batch.indicator(), weighted)?;
    let temps: Vec<f64> = batch
        .block_t_k
        .iter()
        .map(|&tk| beta * (sched.t_max() - tk) as f64)
        .collect();
    let z = g.scale_rows(per_block, temps)?;
    let sp = g.softplus(z);
    let loss = g.mean(sp);
    let value = g.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("surrogate loss".into()));
    }
    let grads = if with_grads {
        Some(phi.grads(&g, &bound, loss)?)
    } else {
        None
    };
    Ok((value, grads))
}

/// One Adam step on `φ` for the mean surrogate loss over `batch`.
pub fn surrogate_update(
    phi: &mut Denoiser,
    adam: &mut AdamState,
    reference: &Denoiser,
    sched: &NoiseSchedule,
    batch: &SurrogateBatch,
    beta: f64,
) -> Result<f64> {
    let (loss, grads) = surrogate_loss(phi, reference, sched, batch, beta, true)?;
    adam.step(phi.params_mut(), &grads.expect("requested"))?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_gap_example() {
        // With μ_q = 0, μ_φ = 0.2, μ_ref = 0.1 and η = 1.
        let gap = (0.2f64.powi(2) - 0.1f64.powi(2)) / 2.0;
        assert!((gap - 0.015).abs() < 1e-15);
    }

    #[test]
    fn model_mean_matches_posterior_when_prediction_is_anchor() {
        let sched = NoiseSchedule::linear(1000).unwrap();
        let x_t = Matrix::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let x0 = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eta = [sched.posterior_eta(600, 0).unwrap()];
        let m = model_means(&sched, &x_t, &x0, &[600], &eta).unwrap();
        let q = posterior_means(&sched, &x_t, &x0, &[600], &[0], &eta).unwrap();
        assert_eq!(m, q);
    }

    #[test]
    fn reference_modes() {
        let mut p = ParamStore::new();
        p.insert(
            "w",
            crate::numerics::tensor::Tensor::new(vec![1], vec![0.0]).unwrap(),
        )
        .unwrap();
        let mut live = p.clone();
        live.get_mut("w").unwrap().data_mut()[0] = 1.0;

        let mut frozen = ReferenceModel::new(&p, ReferenceMode::Frozen).unwrap();
        for it in 1..=1000 {
            frozen.update(&live, it).unwrap();
        }
        assert_eq!(frozen.params(), &p);

        let mut periodic =
            ReferenceModel::new(&p, ReferenceMode::Periodic { period: 100 }).unwrap();
        for it in 1..=250 {
            live.get_mut("w").unwrap().data_mut()[0] = it as f32;
            periodic.update(&live, it).unwrap();
            let want = (it / 100 * 100) as f32;
            assert_eq!(periodic.params().get("w").unwrap().data()[0], want);
        }
        assert!(ReferenceModel::new(&p, ReferenceMode::Periodic { period: 0 }).is_err());
    }
}
