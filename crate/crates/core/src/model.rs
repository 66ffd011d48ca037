//! Clean-sample predictor shared by the teacher, student, fake-score and
//! surrogate networks.
//!
//! The raw [`Mlp`] is wrapped with input/output scaling so that its target
//! has unit scale at every noise level:
//! `x̂0 = c_skip·x_t + c_out·F(c_in·x_t, t, c)` with
//! `c_skip = α·σ_d²/v`, `c_out = σ·σ_d/√v`, `c_in = 1/√v`, `v = α²σ_d² + σ²`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::mlp::{BoundMlp, Mlp, MlpSpec};
use crate::numerics::rng::StreamKey;
use crate::numerics::tensor::{Grads, Matrix, ParamStore};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    net: Mlp,
    sigma_data: f64,
}

/// Per-row scalings `(c_skip, c_out, c_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Preconditioning {
    pub skip: Vec<f64>,
    pub out: Vec<f64>,
    pub input: Vec<f64>,
}

impl Denoiser {
    pub fn new(spec: MlpSpec, sigma_data: f64, key: StreamKey) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma_data must be positive, got {sigma_data}"
            )));
        }
        Ok(Denoiser {
            net: Mlp::new(spec, key)?,
            sigma_data,
        })
    }

    pub fn from_params(spec: MlpSpec, sigma_data: f64, params: ParamStore) -> Result<Self> {
        Ok(Denoiser {
            net: Mlp::from_params(spec, params)?,
            sigma_data,
        })
    }

    pub fn load(dir: &Path, spec: MlpSpec, sigma_data: f64) -> Result<Self> {
        Self::from_params(spec, sigma_data, checkpoint::load(dir)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(self.net.params(), dir)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn params(&self) -> &ParamStore {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    /// Copy of `self` carrying `params` instead.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        self.net
            .params()
            .check_same_layout(&params, "Denoiser::with_params")?;
        Ok(Denoiser {
            net: Mlp::from_params(self.net.spec().clone(), params)?,
            sigma_data: self.sigma_data,
        })
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn x_dim(&self) -> usize {
        self.net.spec().x_dim
    }

    pub fn preconditioning(&self, sched: &NoiseSchedule, t: &[usize]) -> Preconditioning {
        let sd2 = self.sigma_data * self.sigma_data;
        let mut p = Preconditioning {
            skip: Vec::with_capacity(t.len()),
            out: Vec::with_capacity(t.len()),
            input: Vec::with_capacity(t.len()),
        };
        for &ti in t {
            let (a, s) = (sched.alpha(ti), sched.sigma(ti));
            let v = a * a * sd2 + s * s;
            let rv = v.sqrt();
            p.skip.push(a * sd2 / v);
            p.out.push(s * self.sigma_data / rv);
            p.input.push(1.0 / rv);
        }
        p
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        self.net.bind(g, trainable)
    }

    /// `x̂0(x_t, t, c)` recorded on `g`.
    pub fn predict_on(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        sched: &NoiseSchedule,
        x_t: Var,
        t: &[usize],
        c: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > sched.t_max()) {
            return Err(Error::invalid(format!(
                "denoiser timestep {bad} outside [1, {}]",
                sched.t_max()
            )));
        }
        let p = self.preconditioning(sched, t);
        let x_in = g.scale_rows(x_t, p.input)?;
        let tf: Vec<f64> = t.iter().map(|&ti| ti as f64).collect();
        let f = self.net.forward_bound(g, bound, x_in, &tf, c)?;
        g.lincomb_rows(x_t, p.skip, f, p.out)
    }

    /// Inference-only prediction.
    pub fn predict(
        &self,
        sched: &NoiseSchedule,
        x_t: &Matrix,
        t: &[usize],
        c: &[usize],
    ) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let out = self.predict_on(&mut g, &bound, sched, x, t, c)?;
        Ok(g.value(out).clone())
    }

    /// Score `−(x_t − α_t·x̂0)/σ_t²` of the modeled noisy marginal.
    pub fn score(
        &self,
        sched: &NoiseSchedule,
        x_t: &Matrix,
        t: &[usize],
        c: &[usize],
    ) -> Result<Matrix> {
        let x0 = self.predict(sched, x_t, t, c)?;
        score_from_x0(sched, x_t, &x0, t)
    }

    pub fn grads(&self, g: &Graph, bound: &BoundMlp, loss: Var) -> Result<Grads> {
        self.net.grads(g, bound, loss)
    }
}

/// Score implied by a clean-sample prediction: `−(x_t − α_t·x̂0)/σ_t²`.
pub fn score_from_x0(
    sched: &NoiseSchedule,
    x_t: &Matrix,
    x0: &Matrix,
    t: &[usize],
) -> Result<Matrix> {
    if x_t.shape() != x0.shape() || t.len() != x_t.rows {
        return Err(Error::Shape {
            context: "score".into(),
            expected: vec![x_t.rows, x_t.cols],
            actual: vec![x0.rows, x0.cols],
        });
    }
    let mut out = Matrix::zeros(x_t.rows, x_t.cols);
    for (r, &ti) in t.iter().enumerate() {
        let s = sched.sigma(ti);
        if ti == 0 || s <= 0.0 {
            return Err(Error::invalid("score undefined at t = 0"));
        }
        let a = sched.alpha(ti);
        for c in 0..x_t.cols {
            let i = r * x_t.cols + c;
            out.data[i] = -(x_t.data[i] - a * x0.data[i]) / (s * s);
        }
    }
    Ok(out)
}
