//! Teacher diffusion model: data tasks, denoising pretraining, score
//! evaluation and many-step deterministic sampling.

pub mod task;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{sliced_w2, DEFAULT_PROJECTIONS};
use crate::model::Denoiser;
use crate::numerics::graph::Graph;
use crate::numerics::mlp::{Activation, MlpSpec};
use crate::numerics::optim::{AdamConfig, AdamState};
use crate::numerics::rng::{NoiseStream, StreamKey};
use crate::numerics::tensor::{Grads, Matrix};
use crate::schedule::{NoiseSchedule, StepGrid};

pub use task::{TaskConfig, TaskKind, ToyTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
        }
    }
}

impl NetConfig {
    pub fn spec(&self, task: &ToyTask, t_max: usize) -> MlpSpec {
        MlpSpec {
            x_dim: 2,
            num_conditions: task.num_conditions(),
            hidden: self.hidden.clone(),
            activation: self.activation,
            t_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub net: NetConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last iteration by cosine decay.
    pub final_lr: f64,
    /// Sliced-W2 evaluation period in iterations.
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Steps of the deterministic sampler used for evaluation.
    pub sample_steps: usize,
    pub weighting: LossWeight,
    /// Abort if the final held-out denoising loss exceeds this.
    pub max_held_out_loss: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            net: NetConfig::default(),
            iterations: 30_000,
            batch_size: 256,
            lr: 1e-3,
            final_lr: 1e-5,
            eval_every: 2_000,
            eval_samples: 2048,
            sample_steps: 50,
            weighting: LossWeight::UnitTarget,
            max_held_out_loss: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub sliced_w2: f64,
    pub wall_clock_s: f64,
}

/// Result of [`pretrain`].
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Denoiser,
    pub metrics: Vec<TeacherMetricsRow>,
    pub held_out_loss: f64,
}

/// Draws for one denoising-loss evaluation: `t ~ U[1, T]` and `ε ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Matrix,
}

impl NoiseDraw {
    pub fn sample(
        rows: usize,
        cols: usize,
        t_lo: usize,
        t_hi: usize,
        noise: &mut NoiseStream,
    ) -> Self {
        let t = (0..rows).map(|_| noise.int_inclusive(t_lo, t_hi)).collect();
        let eps = Matrix {
            rows,
            cols,
            data: noise.normals(rows * cols),
        };
        NoiseDraw { t, eps }
    }
}

/// Per-timestep weight `λ_t` of the denoising loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    /// `λ_t = 1`.
    #[default]
    Uniform,
    /// `λ_t = 1/c_out(t)²`, which gives the raw network target unit scale
    /// at every noise level.
    UnitTarget,
}

impl LossWeight {
    pub fn weight(self, model: &Denoiser, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            LossWeight::Uniform => 1.0,
            LossWeight::UnitTarget => {
                let c_out = model.preconditioning(sched, &[t]).out[0];
                1.0 / (c_out * c_out)
            }
        }
    }
}

/// `mean_i λ_t‖x̂0(x_t,i) − x_i‖²` with `t ~ U[1, T]`, plus its parameter
/// gradient.
pub fn denoising_loss(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x0: &Matrix,
    c: &[usize],
    weight: LossWeight,
    noise: &mut NoiseStream,
) -> Result<(f64, Grads)> {
    let draw = NoiseDraw::sample(x0.rows, x0.cols, 1, sched.t_max(), noise);
    denoising_loss_with(model, sched, x0, c, &draw, weight, true)
        .map(|(l, g)| (l, g.expect("requested")))
}

/// Denoising loss for explicit draws; gradients only when `with_grads`.
pub fn denoising_loss_with(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x0: &Matrix,
    c: &[usize],
    draw: &NoiseDraw,
    weight: LossWeight,
    with_grads: bool,
) -> Result<(f64, Option<Grads>)> {
    if x0.rows == 0 {
        return Err(Error::invalid("denoising loss on an empty batch"));
    }
    if draw.t.len() != x0.rows || draw.eps.shape() != x0.shape() || c.len() != x0.rows {
        return Err(Error::Shape {
            context: "denoising_loss".into(),
            expected: vec![x0.rows, x0.cols],
            actual: vec![draw.t.len(), c.len()],
        });
    }
    let mut x_t = Matrix::zeros(x0.rows, x0.cols);
    for (r, &t) in draw.t.iter().enumerate() {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        for (o, (&x, &e)) in x_t
            .row_mut(r)
            .iter_mut()
            .zip(x0.row(r).iter().zip(draw.eps.row(r)))
        {
            *o = a * x + s * e;
        }
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, with_grads);
    let xt = g.constant(x_t);
    let pred = model.predict_on(&mut g, &bound, sched, xt, &draw.t, c)?;
    let target = g.constant(x0.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let per_row = g.sum_cols(sq);
    let per_row = match weight {
        LossWeight::Uniform => per_row,
        w => {
            let lam = draw.t.iter().map(|&t| w.weight(model, sched, t)).collect();
            g.scale_rows(per_row, lam)?
        }
    };
    let loss = g.mean(per_row);
    let value = g.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    let grads = if with_grads {
        Some(model.grads(&g, &bound, loss)?)
    } else {
        None
    };
    Ok((value, grads))
}

/// Uniform conditions `0, 1, …` cycled over `n` rows.
pub fn round_robin_conditions(n: usize, num_conditions: usize) -> Vec<usize> {
    (0..n).map(|i| i % num_conditions).collect()
}

/// Deterministic `steps`-step sampling from fresh `x_T ~ N(0, I)`.
pub fn sample_ddim(
    model: &Denoiser,
    sched: &NoiseSchedule,
    c: &[usize],
    steps: usize,
    noise: &mut NoiseStream,
) -> Result<Matrix> {
    let x_t = Matrix {
        rows: c.len(),
        cols: model.x_dim(),
        data: noise.normals(c.len() * model.x_dim()),
    };
    sample_ddim_from(model, sched, x_t, c, steps)
}

/// Deterministic sampling from a given `x_T`.
pub fn sample_ddim_from(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x_big_t: Matrix,
    c: &[usize],
    steps: usize,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let grid = StepGrid::uniform(sched.t_max(), steps)?;
    let mut x = x_big_t;
    for k in (1..=steps).rev() {
        let (t, s) = (grid.knot(k), grid.knot(k - 1));
        let x0 = model.predict(sched, &x, &vec![t; x.rows], c)?;
        x = sched.ddim_step(&x, &x0, t, s)?;
    }
    Ok(x)
}

/// Sliced-W2 between `steps`-step samples and fresh data, conditions cycled.
pub fn sample_quality(
    model: &Denoiser,
    task: &ToyTask,
    sched: &NoiseSchedule,
    n: usize,
    steps: usize,
    key: StreamKey,
) -> Result<f64> {
    let c = round_robin_conditions(n, task.num_conditions());
    let samples = sample_ddim(
        model,
        sched,
        &c,
        steps,
        &mut key.derive_str("samples").stream(),
    )?;
    let data = task.sample_conditions(&c, &mut key.derive_str("data").stream())?;
    sliced_w2(&samples, &data, DEFAULT_PROJECTIONS)
}

/// Train a teacher from scratch with Adam on the denoising loss.
pub fn pretrain(
    task: &ToyTask,
    sched: &NoiseSchedule,
    cfg: &TeacherConfig,
    key: StreamKey,
) -> Result<Pretrained> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config(
            "teacher batch_size and eval_every must be positive".into(),
        ));
    }
    let key = key.derive_str("teacher");
    let spec = cfg.net.spec(task, sched.t_max());
    let mut model = Denoiser::new(spec, task.sigma_data(), key.derive_str("init"))?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params());
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut last_w2 = f64::NAN;
    for it in 1..=cfg.iterations {
        adam.config.lr = cosine_lr(cfg.lr, cfg.final_lr, it, cfg.iterations);
        let mut rng = key.derive_str("batch").derive(it as u64).stream();
        let c: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.index(task.num_conditions()))
            .collect();
        let x0 = task.sample_conditions(&c, &mut rng)?;
        let (loss, grads) = denoising_loss(&model, sched, &x0, &c, cfg.weighting, &mut rng)
            .map_err(|e| diverged(it, e))?;
        adam.step(model.params_mut(), &grads)
            .map_err(|e| diverged(it, e))?;
        if it == 1 || it % cfg.eval_every == 0 || it == cfg.iterations {
            last_w2 = sample_quality(
                &model,
                task,
                sched,
                cfg.eval_samples,
                cfg.sample_steps,
                key.derive_str("eval"),
            )?;
            log::info!("teacher it {it}: loss {loss:.5} sliced_w2 {last_w2:.4}");
        }
        metrics.push(TeacherMetricsRow {
            iteration: it,
            loss,
            sliced_w2: last_w2,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    let held_out_loss = held_out_loss(
        &model,
        task,
        sched,
        cfg.weighting,
        4096,
        key.derive_str("held_out"),
    )?;
    if let Some(max) = cfg.max_held_out_loss {
        if held_out_loss > max {
            return Err(Error::Diverged {
                iteration: cfg.iterations,
                message: format!(
                    "held-out denoising loss {held_out_loss:.5} above threshold {max}"
                ),
            });
        }
    }
    Ok(Pretrained {
        model,
        metrics,
        held_out_loss,
    })
}

/// Cosine interpolation from `lr` at iteration 1 to `final_lr` at `total`.
pub fn cosine_lr(lr: f64, final_lr: f64, it: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let u = (it - 1) as f64 / (total - 1) as f64;
    final_lr + 0.5 * (lr - final_lr) * (1.0 + (std::f64::consts::PI * u).cos())
}

/// Denoising loss on fresh data with a fixed stream (no gradients).
pub fn held_out_loss(
    model: &Denoiser,
    task: &ToyTask,
    sched: &NoiseSchedule,
    weight: LossWeight,
    n: usize,
    key: StreamKey,
) -> Result<f64> {
    let mut rng = key.stream();
    let c = round_robin_conditions(n, task.num_conditions());
    let x0 = task.sample_conditions(&c, &mut rng)?;
    let draw = NoiseDraw::sample(n, 2, 1, sched.t_max(), &mut rng);
    Ok(denoising_loss_with(model, sched, &x0, &c, &draw, weight, false)?.0)
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged {
            iteration,
            message: m,
        },
        other => other,
    }
}
