//! Independent oracles and criterion checks shared by the integration
//! tests and the acceptance target.

#![allow(dead_code, clippy::needless_range_loop)]

use fewstep_core::model::Denoiser;
use fewstep_core::numerics::{Activation, Grads, Matrix, MlpSpec, NoiseStream, StreamKey};
use fewstep_core::rewards::{
    completion_variance_probe, group_advantages, levenshtein, text_render_reward, RewardKind,
};
use fewstep_core::schedule::{NoiseSchedule, StepGrid};
use fewstep_core::student::{
    kl_term_grad, BackpropPath, LambdaRule, RolloutMode, Student, TrajectoryBatch,
};
use fewstep_core::surrogate::{
    delta_kl_from_predictions, gaussian_log_density, sample_surrogate_batch, surrogate_loss,
    GroupRef, TimeSampling,
};
use fewstep_core::teacher::{denoising_loss_with, LossWeight, NoiseDraw, ToyTask};
use fewstep_core::trainer::{
    reward_term_grad, R1Trainer, RewardEstimator, RewardGradForm, TrainerConfig,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Small conditional denoiser with weights pushed away from zero.
pub fn tiny_denoiser(seed: u64, hidden: usize, t_max: usize, conditions: usize) -> Denoiser {
    let spec = MlpSpec {
        x_dim: 2,
        num_conditions: conditions,
        hidden: vec![hidden],
        activation: Activation::Silu,
        t_max,
    };
    let mut d = Denoiser::new(spec, 0.7, StreamKey::new(seed)).unwrap();
    for (_, t) in d.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v *= 2.5;
        }
    }
    d
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut NoiseStream) -> Matrix {
    Matrix::new(
        rows,
        cols,
        rng.normals(rows * cols)
            .into_iter()
            .map(|v| v * scale)
            .collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Schedule oracle: α_t = 1 − t/T, σ_t = t/T written out directly.

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub t_max: usize,
}

impl Linear {
    pub fn a(&self, t: usize) -> f64 {
        1.0 - t as f64 / self.t_max as f64
    }

    pub fn s(&self, t: usize) -> f64 {
        t as f64 / self.t_max as f64
    }

    /// `(α_{t|s}, σ_{t|s})`.
    pub fn kernel(&self, s: usize, t: usize) -> (f64, f64) {
        let alpha = self.a(t) / self.a(s);
        let var = self.s(t).powi(2) - alpha * alpha * self.s(s).powi(2);
        (alpha, var.max(0.0).sqrt())
    }

    /// Posterior std for `t → t−1` anchored at `u`.
    pub fn eta(&self, t: usize, u: usize) -> f64 {
        (0.8 * self.kernel(t - 1, t).1).min(self.kernel(u, t - 1).1)
    }

    /// Mean of `q(x_s | x_t, x_u)` with posterior std `eta`.
    pub fn posterior_mean(
        &self,
        x_t: &[f64],
        x_u: &[f64],
        t: usize,
        s: usize,
        u: usize,
        eta: f64,
    ) -> Vec<f64> {
        let (a_su, s_su) = self.kernel(u, s);
        let (a_tu, s_tu) = self.kernel(u, t);
        let dir = (s_su * s_su - eta * eta).max(0.0).sqrt();
        x_t.iter()
            .zip(x_u)
            .map(|(xt, xu)| a_su * xu + dir * (xt - a_tu * xu) / s_tu)
            .collect()
    }

    /// Deterministic update `t → s` from a clean prediction.
    pub fn ddim(&self, x_t: &[f64], x0: &[f64], t: usize, s: usize) -> Vec<f64> {
        x_t.iter()
            .zip(x0)
            .map(|(xt, x0)| self.a(s) * x0 + self.s(s) * (xt - self.a(t) * x0) / self.s(t))
            .collect()
    }

    /// `KL(q‖p_φ) − KL(q‖p_ref)` for one row.
    pub fn delta_kl(
        &self,
        x_t: &[f64],
        x_tk: &[f64],
        t: usize,
        t_k: usize,
        x0p: &[f64],
        x0r: &[f64],
    ) -> f64 {
        let eta = self.eta(t, t_k);
        let mq = self.posterior_mean(x_t, x_tk, t, t - 1, t_k, eta);
        let mp = self.posterior_mean(x_t, x0p, t, t - 1, 0, eta);
        let mr = self.posterior_mean(x_t, x0r, t, t - 1, 0, eta);
        let dp: f64 = mq.iter().zip(&mp).map(|(a, b)| (a - b).powi(2)).sum();
        let dr: f64 = mq.iter().zip(&mr).map(|(a, b)| (a - b).powi(2)).sum();
        (dp - dr) / (2.0 * eta * eta)
    }
}

/// `x_{t_k}` of a deterministic trajectory recomputed from its noise state
/// with the oracle update and no rounding.
pub fn generate_oracle(
    model: &Denoiser,
    sched: &NoiseSchedule,
    grid: &StepGrid,
    traj: &TrajectoryBatch,
    k: usize,
) -> Matrix {
    let lin = Linear {
        t_max: sched.t_max(),
    };
    let rows = traj.len();
    let mut x = traj.states[grid.steps()].clone();
    for j in (k..grid.steps()).rev() {
        let (t, s) = (grid.knot(j + 1), grid.knot(j));
        let x0 = model
            .predict(sched, &x, &vec![t; rows], &traj.conditions)
            .unwrap();
        let mut next = Matrix::zeros(rows, x.cols);
        for r in 0..rows {
            next.row_mut(r)
                .copy_from_slice(&lin.ddim(x.row(r), x0.row(r), t, s));
        }
        x = next;
    }
    x
}

/// Central differences of `f` over every f32 parameter of `model`, as
/// `(name, gradient)` pairs in store order. Steps `h` and `h/2` are
/// combined by Richardson extrapolation.
pub fn finite_difference_grads(
    model: &Denoiser,
    f: impl Fn(&Denoiser) -> f64,
) -> Vec<(String, Vec<f64>)> {
    let names: Vec<String> = model.params().names().cloned().collect();
    let mut out = Vec::new();
    for name in names {
        let len = model.params().get(&name).unwrap().len();
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let p = model.params().get(&name).unwrap().data()[i];
            let mut m = model.clone();
            let mut central = |h: f32| {
                let (up, dn) = (p + h, p - h);
                m.params_mut().get_mut(&name).unwrap().data_mut()[i] = up;
                let fp = f(&m);
                m.params_mut().get_mut(&name).unwrap().data_mut()[i] = dn;
                let fm = f(&m);
                (fp - fm) / (f64::from(up) - f64::from(dn))
            };
            let h = 1e-3_f32 * p.abs().max(0.1);
            // Richardson step: cancels the h² term of the central difference.
            let (wide, narrow) = (central(h), central(h / 2.0));
            g.push((4.0 * narrow - wide) / 3.0);
        }
        out.push((name, g));
    }
    out
}

/// Largest entrywise relative error between analytic and numerical gradients.
pub fn grad_error(analytic: &Grads, numerical: &[(String, Vec<f64>)]) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, fd) in numerical {
        let a = analytic.get(name).unwrap_or(&[]);
        for (i, &n) in fd.iter().enumerate() {
            worst = worst.max(rel_err(a.get(i).copied().unwrap_or(0.0), n));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients against central differences.

/// Per-gradient worst relative errors on one random instance.
pub fn gradient_fidelity(seed: u64) -> (usize, Vec<(&'static str, f64)>) {
    let t_max = 100;
    let sched = NoiseSchedule::linear(t_max).unwrap();
    let lin = Linear { t_max };
    let key = StreamKey::new(seed);
    let mut rng = key.derive_str("data").stream();
    let model = tiny_denoiser(seed.wrapping_mul(7) + 1, 4, t_max, 2);
    let n_params = model.params().total_count();
    let rows = 6;
    let c: Vec<usize> = (0..rows).map(|i| i % 2).collect();
    let mut out = Vec::new();

    let x0 = random_matrix(rows, 2, 1.0, &mut rng);
    let draw = NoiseDraw::sample(rows, 2, 1, t_max, &mut rng);
    for (name, w) in [
        ("denoising_loss_uniform", LossWeight::Uniform),
        ("denoising_loss_unit_target", LossWeight::UnitTarget),
    ] {
        let (_, g) = denoising_loss_with(&model, &sched, &x0, &c, &draw, w, true).unwrap();
        let fd = finite_difference_grads(&model, |m| {
            denoising_loss_with(m, &sched, &x0, &c, &draw, w, false)
                .unwrap()
                .0
        });
        out.push((name, grad_error(&g.unwrap(), &fd)));
    }

    let grid = StepGrid::uniform(t_max, 2).unwrap();
    let student = Student::new(model.clone(), grid.clone());
    let traj = student
        .rollout(
            &sched,
            &c,
            RolloutMode::Deterministic,
            key.derive_str("rollout"),
        )
        .unwrap();
    let fake = tiny_denoiser(seed.wrapping_mul(7) + 2, 4, t_max, 2);
    let teacher = tiny_denoiser(seed.wrapping_mul(7) + 3, 4, t_max, 2);
    let pulled = |m: &Denoiser, v: &Matrix, k: usize| -> f64 {
        let x = generate_oracle(m, &sched, &grid, &traj, k);
        x.data.iter().zip(&v.data).map(|(a, b)| a * b).sum::<f64>() / rows as f64
    };
    for k in 0..2 {
        let kl = kl_term_grad(
            &student,
            &fake,
            &teacher,
            &sched,
            &traj,
            k,
            None,
            LambdaRule::Normalized { delta: 1e-2 },
            BackpropPath::FullPath,
            &mut rng,
        )
        .unwrap();
        let fd = finite_difference_grads(&model, |m| pulled(m, &kl.grad_xtk, k));
        out.push((
            if k == 0 {
                "tdm_pullback_endpoint"
            } else {
                "tdm_pullback_intermediate"
            },
            grad_error(&kl.grads, &fd),
        ));
    }

    let phi = tiny_denoiser(seed.wrapping_mul(7) + 4, 4, t_max, 2);
    let reference = tiny_denoiser(seed.wrapping_mul(7) + 5, 4, t_max, 2);
    let rewards = [1.0, 0.0, 0.4, 0.0, 1.0, 0.7];
    let group = group_advantages(&rewards).unwrap();
    let gref = GroupRef {
        traj: &traj,
        rewards: &group,
    };
    for (name, sampling) in [
        ("surrogate_loss_uniform_t", TimeSampling::Uniform),
        ("surrogate_loss_importance_t", TimeSampling::Importance),
    ] {
        let batch = sample_surrogate_batch(&[gref], &[0, 1], &grid, &sched, 2, sampling, &mut rng)
            .unwrap()
            .unwrap();
        let (_, g) = surrogate_loss(&phi, &reference, &sched, &batch, 0.01, true).unwrap();
        let fd = finite_difference_grads(&phi, |m| {
            surrogate_loss(m, &reference, &sched, &batch, 0.01, false)
                .unwrap()
                .0
        });
        out.push((name, grad_error(&g.unwrap(), &fd)));
    }

    // Reward term: r̃ evaluated by the oracle on x_{t_k}(θ).
    let beta = 0.01;
    for (name, form) in [
        ("reward_pullback_expected", RewardGradForm::ExpectedLogRatio),
        (
            "reward_pullback_reparameterized",
            RewardGradForm::Reparameterized,
        ),
    ] {
        let k = 1;
        let t_k = grid.knot(k);
        let est = RewardEstimator {
            beta,
            form,
            sampling: TimeSampling::Importance,
            draws: 2,
        };
        let term = reward_term_grad(
            &student,
            &phi,
            &reference,
            &sched,
            &traj,
            k,
            &est,
            BackpropPath::FullPath,
            &mut rng,
        )
        .unwrap();
        let reward_of = |x: &Matrix| -> f64 {
            let mut total = 0.0;
            for d in &term.draws {
                let mut x_t = Matrix::zeros(rows, 2);
                for r in 0..rows {
                    let (a, s) = lin.kernel(t_k, d.t[r]);
                    for j in 0..2 {
                        x_t.data[2 * r + j] = a * x.get(r, j) + s * d.eps.get(r, j);
                    }
                }
                let xp = phi.predict(&sched, &x_t, &d.t, &c).unwrap();
                let xr = reference.predict(&sched, &x_t, &d.t, &c).unwrap();
                for r in 0..rows {
                    let t = d.t[r];
                    let scale = beta * (t_max - t_k) as f64 * d.weight[r];
                    total += match form {
                        RewardGradForm::ExpectedLogRatio => {
                            -scale
                                * lin.delta_kl(x_t.row(r), x.row(r), t, t_k, xp.row(r), xr.row(r))
                        }
                        _ => {
                            let eta = lin.eta(t, t_k);
                            let (a_p, s_p) = lin.kernel(t_k, t - 1);
                            let dir = (s_p * s_p - eta * eta).sqrt();
                            let x_prev: Vec<f64> = (0..2)
                                .map(|j| {
                                    a_p * x.get(r, j) + dir * d.eps.get(r, j) + eta * d.z.get(r, j)
                                })
                                .collect();
                            let mp = lin.posterior_mean(x_t.row(r), xp.row(r), t, t - 1, 0, eta);
                            let mr = lin.posterior_mean(x_t.row(r), xr.row(r), t, t - 1, 0, eta);
                            let sq = |m: &[f64]| {
                                x_prev
                                    .iter()
                                    .zip(m)
                                    .map(|(a, b)| (a - b).powi(2))
                                    .sum::<f64>()
                            };
                            scale * (sq(&mr) - sq(&mp)) / (2.0 * eta * eta)
                        }
                    };
                }
            }
            total / (rows * term.draws.len()) as f64
        };
        let fd = finite_difference_grads(&model, |m| {
            reward_of(&generate_oracle(m, &sched, &grid, &traj, k))
        });
        out.push((name, grad_error(&term.grads, &fd)));

        // The input gradient itself, against differences in x_{t_k}.
        let x_tk = &traj.states[k];
        let mut worst: f64 = 0.0;
        for i in 0..x_tk.data.len() {
            let h = 1e-5;
            let mut xp = x_tk.clone();
            xp.data[i] += h;
            let mut xm = x_tk.clone();
            xm.data[i] -= h;
            // reward_of averages over rows; undo that for the per-row gradient.
            let fd = (reward_of(&xp) - reward_of(&xm)) / (2.0 * h) * rows as f64;
            worst = worst.max(rel_err(term.grad_xtk.data[i], fd));
        }
        out.push((
            if form == RewardGradForm::ExpectedLogRatio {
                "reward_input_grad_expected"
            } else {
                "reward_input_grad_reparameterized"
            },
            worst,
        ));
    }
    (n_params, out)
}

pub fn criterion_gradients(seeds: std::ops::Range<u64>) -> Check {
    let start = std::time::Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    let mut params = 0;
    let mut checks = 0;
    for seed in seeds {
        let (n, errs) = gradient_fidelity(seed);
        params = params.max(n);
        for (name, e) in errs {
            checks += 1;
            if e >= worst.0 {
                worst = (e, name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        "1 gradient fidelity",
        worst.0 <= 1e-3 && params <= 64 && secs < 120.0,
        format!(
            "{checks} checks, nets of {params} parameters, worst {:.2e} ({}), {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 2: kernel algebra by Monte Carlo.

pub struct Moments {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

pub fn moments(x: &Matrix) -> Moments {
    let n = x.rows as f64;
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for j in 0..2 {
        mean[j] = (0..x.rows).map(|r| x.get(r, j)).sum::<f64>() / n;
        std[j] = ((0..x.rows)
            .map(|r| (x.get(r, j) - mean[j]).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt();
    }
    Moments { mean, std }
}

/// Relative moment error of samples against `N(mean, std²)`. Mean errors
/// are measured relative to `max(|mean|, std)`.
pub fn moment_error(m: &Moments, mean: &[f64], std: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..2 {
        worst = worst.max((m.mean[j] - mean[j]).abs() / mean[j].abs().max(std));
        worst = worst.max((m.std[j] - std).abs() / std);
    }
    worst
}

pub fn replicate(row: &[f64], n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, row.len());
    for r in 0..n {
        m.row_mut(r).copy_from_slice(row);
    }
    m
}

/// Worst Monte-Carlo relative moment errors `(composition, posterior
/// marginal)` on `cases` random timestep triples with `n` samples each.
pub fn kernel_monte_carlo(seed: u64, n: usize, cases: usize) -> (f64, f64) {
    use fewstep_core::schedule::diffuse;
    let t_max = 1000;
    let sched = NoiseSchedule::linear(t_max).unwrap();
    let lin = Linear { t_max };
    let mut rng = StreamKey::new(seed).derive_str("kernels").stream();
    let (mut comp, mut marg): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let mut ts = [
            rng.int_inclusive(0, 990),
            rng.int_inclusive(0, 990),
            rng.int_inclusive(0, 990),
        ];
        ts.sort_unstable();
        let [s, u, t] = [ts[0], ts[1] + 1, ts[2] + 2];
        let x_s = rng.normals(2);
        let xs = replicate(&x_s, n);
        // Composition: s → u → t against the direct kernel s → t.
        let (x_u, _) = diffuse(&xs, sched.transition(s, u).unwrap(), &mut rng);
        let (x_t, _) = diffuse(&x_u, sched.transition(u, t).unwrap(), &mut rng);
        let (a, sd) = lin.kernel(s, t);
        let mean: Vec<f64> = x_s.iter().map(|v| a * v).collect();
        comp = comp.max(moment_error(&moments(&x_t), &mean, sd));

        // Posterior marginal: x_t ~ q(·|x_s), x_u ~ q(·|x_t, x_s) has law q(x_u|x_s).
        let eta_max = lin.kernel(s, u).1;
        for frac in [0.0, 0.5, 1.0] {
            let eta = frac * eta_max;
            let x_mid = sched
                .posterior_jump(&x_t, &xs, t, u, s, eta, &mut rng)
                .unwrap();
            let (a, sd) = lin.kernel(s, u);
            let mean: Vec<f64> = x_s.iter().map(|v| a * v).collect();
            marg = marg.max(moment_error(&moments(&x_mid), &mean, sd));
        }
    }
    (comp, marg)
}

/// Largest gap between the `η → 0` posterior step and the deterministic
/// update, both for `η = 0` exactly and `η = 1e-9`.
pub fn eta_zero_gap(seed: u64, cases: usize) -> f64 {
    let t_max = 1000;
    let sched = NoiseSchedule::linear(t_max).unwrap();
    let lin = Linear { t_max };
    let mut rng = StreamKey::new(seed).derive_str("eta0").stream();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let t = rng.int_inclusive(2, t_max);
        let s = rng.int_inclusive(1, t - 1);
        let x_t = random_matrix(4, 2, 1.0, &mut rng);
        let x0 = random_matrix(4, 2, 1.0, &mut rng);
        let det = sched.ddim_step(&x_t, &x0, t, s).unwrap();
        for eta in [0.0, 1e-9] {
            let post = sched.posterior_mean(&x_t, &x0, t, s, 0, eta).unwrap();
            let drawn = sched
                .posterior_jump(&x_t, &x0, t, s, 0, eta, &mut rng)
                .unwrap();
            for i in 0..det.data.len() {
                worst = worst
                    .max((det.data[i] - post.data[i]).abs())
                    .max((det.data[i] - drawn.data[i]).abs());
            }
        }
        for r in 0..4 {
            let o = lin.ddim(x_t.row(r), x0.row(r), t, s);
            for j in 0..2 {
                worst = worst.max((o[j] - det.get(r, j)).abs());
            }
        }
    }
    worst
}

pub fn criterion_kernels() -> Check {
    let start = std::time::Instant::now();
    let (comp, marg) = kernel_monte_carlo(0, 100_000, 8);
    let gap = eta_zero_gap(0, 500);
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        "2 kernel algebra",
        comp <= 0.02 && marg <= 0.02 && gap <= 1e-6 && secs < 120.0,
        format!("composition {comp:.2e}, posterior marginal {marg:.2e} (N=1e5, tol 2%), eta->0 {gap:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 3: group-loss mechanics.

/// Worst `|Σ A_i|` and worst deviation from the independent standardization.
pub fn zero_sum_groups(seed: u64, groups: usize) -> (f64, f64, usize) {
    let mut rng = StreamKey::new(seed).derive_str("groups").stream();
    let (mut sum_err, mut adv_err): (f64, f64) = (0.0, 0.0);
    let mut used = 0;
    for i in 0..groups {
        let g = rng.int_inclusive(2, 64);
        let rewards: Vec<f64> = (0..g)
            .map(|_| match i % 3 {
                0 => rng.uniform(),
                1 => f64::from(u8::from(rng.uniform() < 0.3)),
                _ => (rng.uniform() * 5.0).floor() / 4.0,
            })
            .collect();
        let grp = group_advantages(&rewards).unwrap();
        let mean = rewards.iter().sum::<f64>() / g as f64;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        let signed = grp.signed_weights();
        let pos: f64 = signed.iter().filter(|w| **w > 0.0).sum();
        let neg: f64 = signed.iter().filter(|w| **w <= 0.0).map(|w| -w).sum();
        sum_err = sum_err.max((pos - neg).abs());
        if std < 1e-4 {
            assert!(grp.degenerate);
            continue;
        }
        used += 1;
        for (r, a) in rewards.iter().zip(&signed) {
            adv_err = adv_err.max(((r - mean) / std - a).abs());
        }
    }
    (sum_err, adv_err, used)
}

/// Log-density of `N(mean, cov)` by Cholesky.
pub fn joint_gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("positive definite");
    let d = x - mean;
    let z = chol.l().solve_lower_triangular(&d).unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (z.norm_squared() + log_det + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Worst gap between the summed per-step log-densities of a 3-step
/// stochastic chain and its joint Gaussian density.
pub fn markov_factorization(seed: u64, chains: usize) -> f64 {
    let t_max = 1000;
    let sched = NoiseSchedule::linear(t_max).unwrap();
    let mut rng = StreamKey::new(seed).derive_str("markov").stream();
    let mut worst: f64 = 0.0;
    for _ in 0..chains {
        // Knots t_3 > t_2 > t_1 > t_0 ≥ 1, each step anchored at a fixed x_0.
        let mut knots: Vec<usize> = (0..4).map(|_| rng.int_inclusive(1, t_max)).collect();
        knots.sort_unstable();
        knots.dedup();
        if knots.len() < 4 {
            continue;
        }
        knots.reverse();
        let x0 = random_matrix(1, 2, 1.0, &mut rng);
        let start = random_matrix(1, 2, 1.0, &mut rng);
        let mut states = vec![start.clone()];
        let mut sum_log = 0.0;
        let mut coefs = Vec::new();
        for w in knots.windows(2) {
            let (t, s) = (w[0], w[1]);
            let eta = sched.eta(t, s, 0).unwrap();
            let prev = states.last().unwrap().clone();
            let next = sched
                .posterior_jump(&prev, &x0, t, s, 0, eta, &mut rng)
                .unwrap();
            let mean = sched.posterior_mean(&prev, &x0, t, s, 0, eta).unwrap();
            sum_log += gaussian_log_density(&next, &mean, &[eta])[0];
            coefs.push((sched.posterior_coefficients(t, s, 0, eta).unwrap(), eta));
            states.push(next);
        }
        // Joint of (x_2, x_1, x_0') per coordinate: y_j = a_j·x0 + b_j·y_{j−1} + η_j·z_j.
        let mut total = 0.0;
        for d in 0..2 {
            let mut mean = DVector::zeros(3);
            let mut load = DMatrix::zeros(3, 3);
            let mut prev_mean = start.data[d];
            let mut prev_load = DVector::<f64>::zeros(3);
            for (j, &((a, b), eta)) in coefs.iter().enumerate() {
                let m = a * x0.data[d] + b * prev_mean;
                let mut l = prev_load.clone() * b;
                l[j] += eta;
                mean[j] = m;
                load.set_row(j, &l.transpose());
                prev_mean = m;
                prev_load = l;
            }
            let cov = &load * load.transpose();
            let y = DVector::from_iterator(3, (1..4).map(|j| states[j].data[d]));
            total += joint_gaussian_logpdf(&y, &mean, &cov);
        }
        worst = worst.max((total - sum_log).abs());
    }
    worst
}

/// Probabilists' Gauss–Hermite nodes and weights (weights sum to 1) by
/// Golub–Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let v = (i as f64).sqrt();
        j[(i, i - 1)] = v;
        j[(i - 1, i)] = v;
    }
    let eig = SymmetricEigen::new(j);
    let nodes = eig.eigenvalues.iter().copied().collect();
    let weights = (0..n).map(|i| eig.eigenvectors[(0, i)].powi(2)).collect();
    (nodes, weights)
}

/// One tiny instance: `(exact, bound_mean, bound_standard_error)`. The
/// exact group objective takes the expectation over every admissible `t`
/// and over `x_t` by tensor Gauss–Hermite quadrature; the bound averages
/// the implemented surrogate loss over independent draws.
pub fn jensen_instance(seed: u64, draws: usize) -> (f64, f64, f64) {
    const G: usize = 4;
    let t_max = 20;
    let sched = NoiseSchedule::linear(t_max).unwrap();
    let lin = Linear { t_max };
    let grid = StepGrid::uniform(t_max, 1).unwrap();
    let mut rng = StreamKey::new(seed).derive_str("jensen").stream();
    let phi = tiny_denoiser(seed * 3 + 100, 3, t_max, 1);
    let reference = tiny_denoiser(seed * 3 + 101, 3, t_max, 1);
    let x_tk = random_matrix(G, 2, 1.0, &mut rng);
    let traj = TrajectoryBatch {
        conditions: vec![0; G],
        states: vec![x_tk.clone(), random_matrix(G, 2, 1.0, &mut rng)],
        injected: vec![Matrix::zeros(G, 2); 2],
        seeds: vec![0; G],
        mode: RolloutMode::Deterministic,
    };
    let rewards: Vec<f64> = (0..G).map(|_| rng.uniform()).collect();
    let group = group_advantages(&rewards).unwrap();
    let adv = group.advantages.clone();

    let (nodes, weights) = gauss_hermite(20);
    let mut expected = 0.0;
    let times: Vec<usize> = (2..=t_max).collect();
    for &t in &times {
        let (a, s) = lin.kernel(0, t);
        for i in 0..G {
            let mut pts = Vec::new();
            let mut w = Vec::new();
            for (u, wu) in nodes.iter().zip(&weights) {
                for (v, wv) in nodes.iter().zip(&weights) {
                    pts.push(vec![a * x_tk.get(i, 0) + s * u, a * x_tk.get(i, 1) + s * v]);
                    w.push(wu * wv);
                }
            }
            let x_t = Matrix::from_rows(&pts).unwrap();
            let tt = vec![t; pts.len()];
            let cc = vec![0; pts.len()];
            let xp = phi.predict(&sched, &x_t, &tt, &cc).unwrap();
            let xr = reference.predict(&sched, &x_t, &tt, &cc).unwrap();
            let mean_dk: f64 = (0..pts.len())
                .map(|r| w[r] * lin.delta_kl(x_t.row(r), x_tk.row(i), t, 0, xp.row(r), xr.row(r)))
                .sum();
            expected += adv[i] * mean_dk / times.len() as f64;
        }
    }
    // Temperature chosen so the exact argument is of order one.
    let beta = 1.5 / (t_max as f64 * expected.abs().max(1e-3));
    let exact = softplus(beta * t_max as f64 * expected);

    let gref = GroupRef {
        traj: &traj,
        rewards: &group,
    };
    let mut losses = Vec::with_capacity(draws);
    for _ in 0..draws {
        let batch = sample_surrogate_batch(
            &[gref],
            &[0],
            &grid,
            &sched,
            1,
            TimeSampling::Uniform,
            &mut rng,
        )
        .unwrap()
        .unwrap();
        losses.push(
            surrogate_loss(&phi, &reference, &sched, &batch, beta, false)
                .unwrap()
                .0,
        );
    }
    let n = draws as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (exact, mean, (var / n).sqrt())
}

/// `∫ q log(q/p)` for `q = N(m1, s²)`, `p = N(m2, s²)` by Simpson's rule.
pub fn kl_simpson(m1: f64, m2: f64, s: f64) -> f64 {
    let n = 8000;
    let (lo, hi) = (m1 - 14.0 * s, m1 + 14.0 * s);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let q =
            (-(x - m1).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        q * ((x - m2).powi(2) - (x - m1).powi(2)) / (2.0 * s * s)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Worst relative gap between the implemented ΔKL and quadrature.
pub fn delta_kl_quadrature(seed: u64, cases: usize) -> f64 {
    let t_max = 1000;
    let sched = NoiseSchedule::linear(t_max).unwrap();
    let lin = Linear { t_max };
    let mut rng = StreamKey::new(seed).derive_str("dkl").stream();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let t_k = rng.int_inclusive(0, 990);
        let t = rng.int_inclusive(t_k + 2, t_max);
        let eta = lin.eta(t, t_k);
        let x_tk = random_matrix(1, 2, 1.0, &mut rng);
        let x_t = random_matrix(1, 2, 1.0, &mut rng);
        let xp = random_matrix(1, 2, 1.0, &mut rng);
        let xr = random_matrix(1, 2, 1.0, &mut rng);
        let dk = delta_kl_from_predictions(&sched, &x_t, &x_tk, &[t], &[t_k], &[eta], &xp, &xr)
            .unwrap()[0];
        let mq = lin.posterior_mean(x_t.row(0), x_tk.row(0), t, t - 1, t_k, eta);
        let mp = lin.posterior_mean(x_t.row(0), xp.row(0), t, t - 1, 0, eta);
        let mr = lin.posterior_mean(x_t.row(0), xr.row(0), t, t - 1, 0, eta);
        // Isotropic Gaussians: the 2-D KL is the sum of the coordinate KLs.
        let quad: f64 = (0..2)
            .map(|j| kl_simpson(mq[j], mp[j], eta) - kl_simpson(mq[j], mr[j], eta))
            .sum();
        worst = worst.max((dk - quad).abs() / quad.abs().max(1.0));
    }
    worst
}

pub fn criterion_mechanics() -> Check {
    let (sum_err, adv_err, used) = zero_sum_groups(0, 10_000);
    let markov = markov_factorization(0, 200);
    let mut violations = 0;
    let mut worst_gap = f64::INFINITY;
    for i in 0..100 {
        let (exact, bound, se) = jensen_instance(i, 400);
        if exact > bound + 3.0 * se {
            violations += 1;
        }
        worst_gap = worst_gap.min(bound - exact);
    }
    let dkl = delta_kl_quadrature(0, 200);
    Check::new(
        "3 group-loss mechanics",
        sum_err <= 1e-9 && adv_err <= 1e-9 && markov <= 1e-6 && violations == 0 && dkl <= 1e-4,
        format!(
            "(a) 10000 groups ({used} non-degenerate), |Σ A| {sum_err:.1e}; (b) factorization {markov:.1e}; \
             (c) Jensen violations {violations}/100, min bound-exact {worst_gap:.2e}; (d) ΔKL {dkl:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 4: matched initialization.

/// Task whose only mode sits on the median endpoint of `student`, with a
/// radius that splits the group roughly in half.
pub fn splitting_task(student: &Student, sched: &NoiseSchedule, key: StreamKey) -> ToyTask {
    let traj = student
        .rollout(sched, &[0; 64], RolloutMode::Deterministic, key)
        .unwrap();
    let e = traj.endpoints();
    let center = [e.get(0, 0), e.get(0, 1)];
    let mut d: Vec<f64> = (1..e.rows)
        .map(|r| ((e.get(r, 0) - center[0]).powi(2) + (e.get(r, 1) - center[1]).powi(2)).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    ToyTask::custom(vec![center], d[d.len() / 2] / 3.0, vec![vec![0]], vec![0]).unwrap()
}

/// First-iteration generator gradients and surrogate loss with `φ = ref`
/// and `fake = teacher`.
pub fn matched_null(
    teacher: &Denoiser,
    student: Student,
    task: ToyTask,
    sched: &NoiseSchedule,
    key: StreamKey,
) -> (f64, f64, f64, f64, bool) {
    let cfg = TrainerConfig {
        iterations: 1,
        eval_every: 1,
        ..TrainerConfig::default()
    };
    let before = student.model.params().clone();
    let mut tr = R1Trainer::new(
        cfg,
        task,
        sched.clone(),
        teacher.clone(),
        student,
        teacher.clone(),
        key,
    )
    .unwrap();
    let (row, detail) = tr.step_detailed().unwrap();
    assert!(
        detail.groups.iter().any(|g| !g.degenerate),
        "group must carry a reward signal"
    );
    let unchanged = tr.student.model.params() == &before;
    (
        detail.reward_grad.norm(),
        detail.kl_grad.norm(),
        detail.total_grad.norm(),
        (row.surrogate_loss - std::f64::consts::LN_2).abs(),
        unchanged,
    )
}

pub fn matched_null_check(
    teacher: &Denoiser,
    student: Student,
    task: ToyTask,
    sched: &NoiseSchedule,
    key: StreamKey,
) -> Check {
    let (r, k, t, l, unchanged) = matched_null(teacher, student, task, sched, key);
    Check::new(
        "4 matched-initialization null",
        r == 0.0 && k == 0.0 && t == 0.0 && l <= 1e-6 && unchanged,
        format!("|reward grad| {r:e}, |KL grad| {k:e}, |total| {t:e}, |loss - ln 2| {l:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 5: completion variance at a boundary state.

/// Bisect the segment `[hit, miss]` of states at level `k` to the point
/// where the deterministic completion leaves the reward region.
pub fn boundary_state(
    student: &Student,
    sched: &NoiseSchedule,
    task: &ToyTask,
    k: usize,
    c: usize,
    hit: &[f64],
    miss: &[f64],
) -> Vec<f64> {
    let reward_at = |x: &[f64]| {
        let m = Matrix::new(1, 2, x.to_vec()).unwrap();
        let mut unused = StreamKey::new(0).stream();
        let end = student
            .complete(sched, &m, k, &[c], RolloutMode::Deterministic, &mut unused)
            .unwrap();
        RewardKind::Sector
            .point_reward(task, end.row(0), c)
            .unwrap()
    };
    assert_eq!(reward_at(hit), 1.0);
    assert_eq!(reward_at(miss), 0.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    let point =
        |f: f64| -> Vec<f64> { hit.iter().zip(miss).map(|(a, b)| a + f * (b - a)).collect() };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if reward_at(&point(mid)) == 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    point(lo)
}

pub fn variance_probe_check(
    student: &Student,
    sched: &NoiseSchedule,
    task: &ToyTask,
    k: usize,
    c: usize,
    x: &[f64],
) -> Check {
    let start = std::time::Instant::now();
    let mut noise = StreamKey::new(5).derive_str("probe").stream();
    let (det, sto) = completion_variance_probe(
        student,
        sched,
        task,
        RewardKind::Sector,
        x,
        k,
        c,
        2000,
        &mut noise,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        "5 deterministic completion variance",
        det == 0.0 && sto > 0.01 && secs < 60.0,
        format!("var_det {det:e}, var_stoch {sto:.4} at state {k}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 8: text reward.

/// Wagner–Fischer edit distance with the full table.
pub fn levenshtein_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1)
                .min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

pub fn random_string(rng: &mut NoiseStream, max_len: usize) -> String {
    const ALPHABET: [char; 8] = ['a', 'b', 'c', 'd', ' ', 'é', 'ß', '字'];
    let len = rng.int_inclusive(0, max_len);
    (0..len)
        .map(|_| ALPHABET[rng.index(ALPHABET.len())])
        .collect()
}

pub fn criterion_text_reward(pairs: usize) -> Check {
    let mut rng = StreamKey::new(8).derive_str("text").stream();
    let mut mismatches = 0;
    for _ in 0..pairs {
        let pred = random_string(&mut rng, 12);
        let mut reference = random_string(&mut rng, 12);
        if reference.is_empty() {
            reference.push('a');
        }
        let d = levenshtein_oracle(&pred, &reference);
        let n = reference.chars().count();
        let expected = (1.0 - d as f64 / n as f64).max(0.0);
        if levenshtein(&pred, &reference) != d
            || text_render_reward(&pred, &reference).unwrap() != expected
        {
            mismatches += 1;
        }
    }
    Check::new(
        "8 text reward",
        mismatches == 0,
        format!("{mismatches} mismatches on {pairs} random pairs"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 9: reproducibility of whole runs.

/// A complete but small run: teacher, distillation and reinforcement with
/// periodic checkpoints.
pub fn small_run_config(out_dir: &std::path::Path, seed: u64) -> fewstep_core::pipeline::RunConfig {
    let mut cfg = fewstep_core::pipeline::RunConfig {
        out_dir: out_dir.to_path_buf(),
        seed,
        ..Default::default()
    };
    cfg.teacher.net.hidden = vec![16, 16];
    cfg.teacher.iterations = 300;
    cfg.teacher.eval_every = 150;
    cfg.teacher.eval_samples = 512;
    cfg.distill.iterations = 40;
    cfg.distill.eval_every = 20;
    cfg.trainer.iterations = 30;
    cfg.trainer.eval_every = 10;
    cfg.trainer.save_every = Some(10);
    cfg
}

/// Every file under `dir`, relative to it, sorted.
pub fn tree(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    fn walk(root: &std::path::Path, d: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// CSV text with every `wall_clock*` column removed.
pub fn strip_wall_clock(text: &str) -> String {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !header[i].starts_with("wall_clock"))
        .collect();
    let mut out = String::new();
    let pick = |r: &csv::StringRecord| {
        keep.iter()
            .map(|&i| r[i].to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    out.push_str(&pick(&header));
    out.push('\n');
    for rec in rdr.records() {
        out.push_str(&pick(&rec.unwrap()));
        out.push('\n');
    }
    out
}

/// Compare two run directories: CSVs without wall-clock columns, every
/// other file byte for byte. Returns the number of files compared.
pub fn compare_runs(
    a: &std::path::Path,
    b: &std::path::Path,
    skip: &[&str],
) -> Result<usize, String> {
    let (ta, tb) = (tree(a), tree(b));
    if ta != tb {
        return Err(format!("file sets differ: {ta:?} vs {tb:?}"));
    }
    let mut n = 0;
    for rel in ta.iter().filter(|p| !skip.iter().any(|s| p.ends_with(s))) {
        let (x, y) = (
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
        );
        let same = if rel.extension().is_some_and(|e| e == "csv") {
            strip_wall_clock(&String::from_utf8(x).unwrap())
                == strip_wall_clock(&String::from_utf8(y).unwrap())
        } else {
            x == y
        };
        if !same {
            return Err(format!("{} differs", rel.display()));
        }
        n += 1;
    }
    Ok(n)
}

/// Run every stage of `cfg`.
pub fn run_all_stages(cfg: &fewstep_core::pipeline::RunConfig) {
    use fewstep_core::pipeline;
    pipeline::run_pretrain(cfg).unwrap();
    pipeline::run_distill(cfg).unwrap();
    pipeline::run_train(cfg, false).unwrap();
}

pub fn criterion_reproducibility() -> Check {
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        run_all_stages(&small_run_config(d.path(), 7));
    }
    match compare_runs(
        dirs[0].path(),
        dirs[1].path(),
        &[fewstep_core::trainer::CLOCK_FILE],
    ) {
        Ok(n) => Check::new(
            "9 reproducibility",
            true,
            format!("{n} files identical across two full runs (wall-clock columns excluded)"),
        ),
        Err(e) => Check::new("9 reproducibility", false, e),
    }
}
