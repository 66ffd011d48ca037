//! Discrete noise schedule `x_t = α_t·x_0 + σ_t·ε`, exact Gaussian
//! transition kernels between timesteps, and single-step samplers.

use crate::error::{Error, Result};
use crate::numerics::rng::NoiseStream;
use crate::numerics::tensor::Matrix;

/// Fraction of the one-step forward noise used as posterior std.
pub const ETA_FRACTION: f64 = 0.8;

/// Squared kernel variances below this are treated as rounding noise.
const VARIANCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Parameters of `x_t | x_s ~ N(α_{t|s}·x_s, σ_{t|s}²·I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionParams {
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    /// `α_t = 1 − t/T`, `σ_t = t/T`.
    pub fn linear(t_max: usize) -> Result<Self> {
        if t_max < 8 {
            return Err(Error::invalid(format!(
                "schedule needs T >= 8, got {t_max}"
            )));
        }
        let tf = t_max as f64;
        let alphas = (0..=t_max).map(|t| 1.0 - t as f64 / tf).collect();
        let sigmas = (0..=t_max).map(|t| t as f64 / tf).collect();
        Ok(NoiseSchedule {
            t_max,
            alphas,
            sigmas,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::invalid(format!(
                "timestep {t} beyond T = {}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Kernel from `s` to `t` for `0 ≤ s < t ≤ T` with `α_s > 0`.
    pub fn transition(&self, s: usize, t: usize) -> Result<TransitionParams> {
        if s >= t {
            return Err(Error::invalid(format!(
                "transition needs s < t, got s={s}, t={t}"
            )));
        }
        self.kernel(s, t)
    }

    /// Like [`transition`](Self::transition) but also accepts `s == t`,
    /// which yields the identity kernel `(1, 0)`.
    pub fn kernel(&self, s: usize, t: usize) -> Result<TransitionParams> {
        self.check_t(t)?;
        if s > t {
            return Err(Error::invalid(format!(
                "kernel needs s <= t, got s={s}, t={t}"
            )));
        }
        if s == t {
            return Ok(TransitionParams {
                alpha: 1.0,
                sigma: 0.0,
            });
        }
        let a_s = self.alphas[s];
        if a_s <= 0.0 {
            return Err(Error::invalid(format!(
                "α_{s} = 0: no kernel out of the terminal step"
            )));
        }
        let alpha = self.alphas[t] / a_s;
        let var = self.sigmas[t].powi(2) - alpha * alpha * self.sigmas[s].powi(2);
        let var = if var < VARIANCE_CLAMP { 0.0 } else { var };
        Ok(TransitionParams {
            alpha,
            sigma: var.sqrt(),
        })
    }

    /// Posterior std for the step `t → s` anchored at `u`:
    /// `min(0.8·σ_{t|s}, σ_{s|u})`.
    pub fn eta(&self, t: usize, s: usize, u: usize) -> Result<f64> {
        let fwd = self.transition(s, t)?.sigma;
        let cap = self.kernel(u, s)?.sigma;
        Ok((ETA_FRACTION * fwd).min(cap))
    }

    /// Posterior std for the one-step transition `t → t−1` anchored at `t_k`.
    pub fn posterior_eta(&self, t: usize, t_k: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::invalid("posterior step from t = 0"));
        }
        self.eta(t, t - 1, t_k)
    }

    /// Coefficients `(c_x0, c_xt)` with `ddim_step = c_x0·x̂0 + c_xt·x_t`.
    pub fn ddim_coefficients(&self, t: usize, s: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        if s >= t || t == 0 {
            return Err(Error::invalid(format!(
                "ddim step needs s < t, got s={s}, t={t}"
            )));
        }
        let sig_t = self.sigmas[t];
        if sig_t <= 0.0 {
            return Err(Error::invalid(format!("σ_{t} = 0")));
        }
        let ratio = self.sigmas[s] / sig_t;
        Ok((self.alphas[s] - ratio * self.alphas[t], ratio))
    }

    /// Deterministic update `x_s = α_s·x̂0 + σ_s·(x_t − α_t·x̂0)/σ_t`.
    pub fn ddim_step(&self, x_t: &Matrix, x0hat: &Matrix, t: usize, s: usize) -> Result<Matrix> {
        same_shape("ddim_step", x_t, x0hat)?;
        let (a, b) = self.ddim_coefficients(t, s)?;
        Ok(lincomb(x0hat, a, x_t, b))
    }

    /// Mean coefficients `(c_anchor, c_xt)` and std of the Gaussian
    /// `x_s | x_t, x_u` with posterior std `eta`, for `u ≤ s < t`.
    pub fn posterior_coefficients(
        &self,
        t: usize,
        s: usize,
        u: usize,
        eta: f64,
    ) -> Result<(f64, f64)> {
        if !(u <= s && s < t) {
            return Err(Error::invalid(format!(
                "posterior needs u <= s < t, got u={u}, s={s}, t={t}"
            )));
        }
        let k_su = self.kernel(u, s)?;
        let k_tu = self.transition(u, t)?;
        if !(0.0..=k_su.sigma).contains(&eta) {
            return Err(Error::invalid(format!(
                "posterior std {eta} outside [0, {}]",
                k_su.sigma
            )));
        }
        if k_tu.sigma <= 0.0 {
            return Err(Error::invalid(format!("σ_{{{t}|{u}}} = 0")));
        }
        let dir = (k_su.sigma * k_su.sigma - eta * eta).max(0.0).sqrt() / k_tu.sigma;
        Ok((k_su.alpha - dir * k_tu.alpha, dir))
    }

    /// Mean of `q(x_s | x_t, x_u)` = `α_{s|u}·x_u + sqrt(σ_{s|u}² − η²)·ε̂`,
    /// `ε̂ = (x_t − α_{t|u}·x_u)/σ_{t|u}`.
    pub fn posterior_mean(
        &self,
        x_t: &Matrix,
        x_u: &Matrix,
        t: usize,
        s: usize,
        u: usize,
        eta: f64,
    ) -> Result<Matrix> {
        same_shape("posterior_mean", x_t, x_u)?;
        let (a, b) = self.posterior_coefficients(t, s, u, eta)?;
        Ok(lincomb(x_u, a, x_t, b))
    }

    /// Draw from `q(x_{t−1} | x_t, x_{t_k})` with std `eta`.
    pub fn posterior_step(
        &self,
        x_t: &Matrix,
        x_tk: &Matrix,
        t: usize,
        t_k: usize,
        eta: f64,
        noise: &mut NoiseStream,
    ) -> Result<Matrix> {
        if t == 0 {
            return Err(Error::invalid("posterior step from t = 0"));
        }
        self.posterior_jump(x_t, x_tk, t, t - 1, t_k, eta, noise)
    }

    /// Draw from `q(x_s | x_t, x_u)` with std `eta`.
    #[allow(clippy::too_many_arguments)]
    pub fn posterior_jump(
        &self,
        x_t: &Matrix,
        x_u: &Matrix,
        t: usize,
        s: usize,
        u: usize,
        eta: f64,
        noise: &mut NoiseStream,
    ) -> Result<Matrix> {
        let mut out = self.posterior_mean(x_t, x_u, t, s, u, eta)?;
        for v in &mut out.data {
            *v += eta * noise.normal();
        }
        Ok(out)
    }
}

/// Diffuse every row of `x_s` with one kernel. Returns `(x_t, ε)`.
pub fn diffuse(
    x_s: &Matrix,
    params: TransitionParams,
    noise: &mut NoiseStream,
) -> (Matrix, Matrix) {
    let eps = Matrix {
        rows: x_s.rows,
        cols: x_s.cols,
        data: noise.normals(x_s.data.len()),
    };
    (apply_kernel(x_s, params, &eps), eps)
}

/// Diffuse row `r` of `x_s` with `params[r]`.
pub fn diffuse_rows(
    x_s: &Matrix,
    params: &[TransitionParams],
    noise: &mut NoiseStream,
) -> Result<(Matrix, Matrix)> {
    if params.len() != x_s.rows {
        return Err(Error::Shape {
            context: "diffuse_rows".into(),
            expected: vec![x_s.rows],
            actual: vec![params.len()],
        });
    }
    let eps = Matrix {
        rows: x_s.rows,
        cols: x_s.cols,
        data: noise.normals(x_s.data.len()),
    };
    let mut x_t = Matrix::zeros(x_s.rows, x_s.cols);
    for (r, p) in params.iter().enumerate() {
        for c in 0..x_s.cols {
            let i = r * x_s.cols + c;
            x_t.data[i] = p.alpha * x_s.data[i] + p.sigma * eps.data[i];
        }
    }
    Ok((x_t, eps))
}

/// `α·x_s + σ·ε` for a known `ε`.
pub fn apply_kernel(x_s: &Matrix, params: TransitionParams, eps: &Matrix) -> Matrix {
    lincomb(x_s, params.alpha, eps, params.sigma)
}

fn lincomb(a: &Matrix, p: f64, b: &Matrix, q: f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| p * x + q * y)
            .collect(),
    }
}

fn same_shape(context: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            context: context.into(),
            expected: vec![a.rows, a.cols],
            actual: vec![b.rows, b.cols],
        });
    }
    Ok(())
}

/// The `K + 1` knots `t_k = round(T·k/K)` visited by a `K`-step sampler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepGrid {
    knots: Vec<usize>,
}

impl StepGrid {
    pub fn uniform(t_max: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("step grid needs K >= 1"));
        }
        if k > t_max {
            return Err(Error::invalid(format!("K = {k} exceeds T = {t_max}")));
        }
        let knots: Vec<usize> = (0..=k)
            .map(|i| ((t_max * i) as f64 / k as f64).round() as usize)
            .collect();
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("step grid knots not strictly increasing"));
        }
        Ok(StepGrid { knots })
    }

    /// Number of sampler steps `K`.
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    /// `t_k` for `k = 0..=K`; `t_0 = 0`, `t_K = T`.
    pub fn knot(&self, k: usize) -> usize {
        self.knots[k]
    }

    pub fn knots(&self) -> &[usize] {
        &self.knots
    }
}
