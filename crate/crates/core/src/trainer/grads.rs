//! Generator-side gradients: the surrogate reward term and the weighting
//! against the distribution-matching term.

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::numerics::graph::Graph;
use crate::numerics::rng::NoiseStream;
use crate::numerics::tensor::{Grads, Matrix};
use crate::schedule::NoiseSchedule;
use crate::student::{BackpropPath, Student, TrajectoryBatch};
use crate::surrogate::{model_mean_coefficients, TimeSampling};
use crate::trainer::config::{BetaGRule, RewardGradForm};

/// Floor on `‖kl_grad‖` in the norm-ratio rule.
pub const KL_NORM_FLOOR: f64 = 1e-12;

/// Per-member `(t, ε, z)` used to reach `x_t` and `x_{t−1}` from `x_{t_k}`,
/// with the importance weight of each `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardDraw {
    pub t: Vec<usize>,
    pub weight: Vec<f64>,
    pub eps: Matrix,
    pub z: Matrix,
}

impl RewardDraw {
    pub fn sample(
        rows: usize,
        dim: usize,
        t_k: usize,
        sched: &NoiseSchedule,
        sampling: TimeSampling,
        noise: &mut NoiseStream,
    ) -> Result<Self> {
        let (t, weight) = sampling
            .sample(sched, t_k, rows, noise)?
            .into_iter()
            .unzip();
        let eps = Matrix::new(rows, dim, noise.normals(rows * dim))?;
        let z = Matrix::new(rows, dim, noise.normals(rows * dim))?;
        Ok(RewardDraw { t, weight, eps, z })
    }
}

/// Per-row constants tying `x_t` and `x_{t−1}` to `x_{t_k}`.
struct DrawCoefficients {
    /// `α_{t|t_k}`, `σ_{t|t_k}`.
    a_t: Vec<f64>,
    s_t: Vec<f64>,
    /// `α_{t−1|t_k}` and `sqrt(σ_{t−1|t_k}² − η²)`.
    a_prev: Vec<f64>,
    s_prev: Vec<f64>,
    eta: Vec<f64>,
    /// Model-mean coefficients on `x̂0` and `x_t`.
    mean_x0: Vec<f64>,
    mean_xt: Vec<f64>,
    /// Posterior-mean coefficients on `x_{t_k}` and `x_t`.
    q_x_tk: Vec<f64>,
    q_x_t: Vec<f64>,
}

impl DrawCoefficients {
    fn new(sched: &NoiseSchedule, t_k: usize, t: &[usize]) -> Result<Self> {
        let n = t.len();
        let mut c = DrawCoefficients {
            a_t: Vec::with_capacity(n),
            s_t: Vec::with_capacity(n),
            a_prev: Vec::with_capacity(n),
            s_prev: Vec::with_capacity(n),
            eta: Vec::with_capacity(n),
            mean_x0: Vec::with_capacity(n),
            mean_xt: Vec::with_capacity(n),
            q_x_tk: Vec::with_capacity(n),
            q_x_t: Vec::with_capacity(n),
        };
        for &ti in t {
            let fwd = sched.transition(t_k, ti)?;
            let prev = sched.transition(t_k, ti - 1)?;
            let eta = sched.posterior_eta(ti, t_k)?;
            if !(eta > 0.0) {
                return Err(Error::invalid(format!(
                    "reward step at t = {ti} has zero variance"
                )));
            }
            let (a, b) = model_mean_coefficients(sched, ti, eta)?;
            let (qa, qb) = sched.posterior_coefficients(ti, ti - 1, t_k, eta)?;
            c.q_x_tk.push(qa);
            c.q_x_t.push(qb);
            c.a_t.push(fwd.alpha);
            c.s_t.push(fwd.sigma);
            c.a_prev.push(prev.alpha);
            c.s_prev
                .push((prev.sigma * prev.sigma - eta * eta).max(0.0).sqrt());
            c.eta.push(eta);
            c.mean_x0.push(a);
            c.mean_xt.push(b);
        }
        Ok(c)
    }
}

/// `∂/∂x_{t_k} Σ_i ‖x_{t−1,i} − μ_model(x_{t,i})‖² / (2η_i²)` for one model,
/// with `x_{t−1}` replaced by its posterior mean under
/// [`RewardGradForm::ExpectedLogRatio`].
fn transition_nll_input_grad(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x_tk: &Matrix,
    c: &[usize],
    draw: &RewardDraw,
    co: &DrawCoefficients,
    form: RewardGradForm,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let inv_two_var: Vec<f64> = co
        .eta
        .iter()
        .zip(&draw.weight)
        .map(|(e, w)| w / (2.0 * e * e))
        .collect();
    match form {
        RewardGradForm::ExpectedLogRatio => {
            let leaf = g.leaf(x_tk.clone());
            let eps = g.constant(draw.eps.clone());
            let x_t = g.lincomb_rows(leaf, co.a_t.clone(), eps, co.s_t.clone())?;
            let mu_q = g.lincomb_rows(leaf, co.q_x_tk.clone(), x_t, co.q_x_t.clone())?;
            let x0 = model.predict_on(&mut g, &bound, sched, x_t, &draw.t, c)?;
            let mu = g.lincomb_rows(x0, co.mean_x0.clone(), x_t, co.mean_xt.clone())?;
            let d = g.sub(mu_q, mu)?;
            let sq = g.square(d);
            let per_row = g.sum_cols(sq);
            let w = g.scale_rows(per_row, inv_two_var)?;
            let loss = g.sum(w);
            Ok(g.backward(loss, &[leaf])?.swap_remove(0))
        }
        RewardGradForm::Reparameterized => {
            let leaf = g.leaf(x_tk.clone());
            let eps = g.constant(draw.eps.clone());
            let x_t = g.lincomb_rows(leaf, co.a_t.clone(), eps, co.s_t.clone())?;
            let x_prev = g.lincomb_rows(leaf, co.a_prev.clone(), eps, co.s_prev.clone())?;
            let jitter = g.constant(scale_rows(&draw.z, &co.eta));
            let x_prev = g.add(x_prev, jitter)?;
            let x0 = model.predict_on(&mut g, &bound, sched, x_t, &draw.t, c)?;
            let mu = g.lincomb_rows(x0, co.mean_x0.clone(), x_t, co.mean_xt.clone())?;
            let d = g.sub(x_prev, mu)?;
            let sq = g.square(d);
            let per_row = g.sum_cols(sq);
            let w = g.scale_rows(per_row, inv_two_var)?;
            let loss = g.sum(w);
            Ok(g.backward(loss, &[leaf])?.swap_remove(0))
        }
        RewardGradForm::ConditioningOnly => {
            let (x_t_val, x_prev_val) = reward_states(x_tk, draw, co);
            let leaf = g.leaf(x_t_val);
            let x_prev = g.constant(x_prev_val);
            let x0 = model.predict_on(&mut g, &bound, sched, leaf, &draw.t, c)?;
            let mu = g.lincomb_rows(x0, co.mean_x0.clone(), leaf, co.mean_xt.clone())?;
            let d = g.sub(x_prev, mu)?;
            let sq = g.square(d);
            let per_row = g.sum_cols(sq);
            let w = g.scale_rows(per_row, inv_two_var)?;
            let loss = g.sum(w);
            let grad_xt = g.backward(loss, &[leaf])?.swap_remove(0);
            Ok(scale_rows(&grad_xt, &co.a_t))
        }
    }
}

fn scale_rows(m: &Matrix, s: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (r, &v) in s.iter().enumerate() {
        for x in out.row_mut(r) {
            *x *= v;
        }
    }
    out
}

/// `(x_t, x_{t−1})` values reached from `x_tk` under `draw`.
fn reward_states(x_tk: &Matrix, draw: &RewardDraw, co: &DrawCoefficients) -> (Matrix, Matrix) {
    let mut x_t = Matrix::zeros(x_tk.rows, x_tk.cols);
    let mut x_prev = Matrix::zeros(x_tk.rows, x_tk.cols);
    for r in 0..x_tk.rows {
        for j in 0..x_tk.cols {
            let i = r * x_tk.cols + j;
            x_t.data[i] = co.a_t[r] * x_tk.data[i] + co.s_t[r] * draw.eps.data[i];
            x_prev.data[i] = co.a_prev[r] * x_tk.data[i]
                + co.s_prev[r] * draw.eps.data[i]
                + co.eta[r] * draw.z.data[i];
        }
    }
    (x_t, x_prev)
}

/// Gradient of the surrogate reward `β(T − t_k)·log p_φ(x_{t−1}|x_t)/p_ref(x_{t−1}|x_t)`
/// with respect to `x_{t_k}`, one row per member. Both networks are frozen.
#[allow(clippy::too_many_arguments)]
pub fn reward_input_grad(
    phi: &Denoiser,
    reference: &Denoiser,
    sched: &NoiseSchedule,
    x_tk: &Matrix,
    c: &[usize],
    t_k: usize,
    beta: f64,
    draw: &RewardDraw,
    form: RewardGradForm,
) -> Result<Matrix> {
    let co = DrawCoefficients::new(sched, t_k, &draw.t)?;
    // log p_φ − log p_ref = nll_ref − nll_φ; the two sides are separate
    // graphs so identical networks cancel exactly.
    let h_ref = transition_nll_input_grad(reference, sched, x_tk, c, draw, &co, form)?;
    let h_phi = transition_nll_input_grad(phi, sched, x_tk, c, draw, &co, form)?;
    let scale = beta * (sched.t_max() - t_k) as f64;
    let mut out = h_ref;
    for (o, p) in out.data.iter_mut().zip(&h_phi.data) {
        *o = scale * (*o - p);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("reward input gradient".into()));
    }
    Ok(out)
}

/// Settings of the reward-term estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardEstimator {
    /// Surrogate temperature `β`.
    pub beta: f64,
    pub form: RewardGradForm,
    pub sampling: TimeSampling,
    /// `(t, ε, z)` draws averaged per member.
    pub draws: usize,
}

/// Reward-term pieces for one trajectory level.
#[derive(Clone, Debug)]
pub struct RewardTerm {
    pub draws: Vec<RewardDraw>,
    /// `∂r̃/∂x_{t_k}` per member, averaged over the draws.
    pub grad_xtk: Matrix,
    /// `∇_θ` of the mean pulled-back reward; ascend this.
    pub grads: Grads,
}

/// `∇_θ E[r̃(x_{t_k}(θ))]` through the student's generator graph.
#[allow(clippy::too_many_arguments)]
pub fn reward_term_grad(
    student: &Student,
    phi: &Denoiser,
    reference: &Denoiser,
    sched: &NoiseSchedule,
    traj: &TrajectoryBatch,
    k: usize,
    est: &RewardEstimator,
    path: BackpropPath,
    noise: &mut NoiseStream,
) -> Result<RewardTerm> {
    if est.draws == 0 {
        return Err(Error::Config("reward draws per member must be >= 1".into()));
    }
    let t_k = student.grid().knot(k);
    let x_tk = &traj.states[k];
    let mut draws = Vec::with_capacity(est.draws);
    let mut grad_xtk = Matrix::zeros(x_tk.rows, x_tk.cols);
    for _ in 0..est.draws {
        let draw = RewardDraw::sample(x_tk.rows, x_tk.cols, t_k, sched, est.sampling, noise)?;
        let g = reward_input_grad(
            phi,
            reference,
            sched,
            x_tk,
            &traj.conditions,
            t_k,
            est.beta,
            &draw,
            est.form,
        )?;
        for (a, b) in grad_xtk.data.iter_mut().zip(&g.data) {
            *a += b / est.draws as f64;
        }
        draws.push(draw);
    }
    let grads = student.pullback(sched, traj, k, &grad_xtk, path)?;
    Ok(RewardTerm {
        draws,
        grad_xtk,
        grads,
    })
}

/// KL-term weight under `rule`.
pub fn resolve_beta_g(reward_grad: &Grads, kl_grad: &Grads, rule: BetaGRule) -> f64 {
    match rule {
        BetaGRule::Fixed { value } => value,
        BetaGRule::NormRatio { ratio } => {
            ratio * reward_grad.norm() / kl_grad.norm().max(KL_NORM_FLOOR)
        }
    }
}

/// `−reward_grad + β_g·kl_grad`, the descent direction for the generator.
pub fn combine_generator_grads(reward_grad: &Grads, kl_grad: &Grads, beta_g: f64) -> Grads {
    let mut total = reward_grad.scaled(-1.0);
    total.add_scaled(kl_grad, beta_g);
    total
}
