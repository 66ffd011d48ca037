//! Self-checks run by the `verify` command: analytic gradients against
//! finite differences, kernel algebra, group-weight cancellation, the
//! Markov factorization, the Jensen bound of the group loss and the ΔKL
//! closed form against numerical integration.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Denoiser;
use crate::numerics::graph::Graph;
use crate::numerics::mlp::{Activation, MlpSpec};
use crate::numerics::rng::{NoiseStream, StreamKey};
use crate::numerics::tensor::{Grads, Matrix};
use crate::rewards::group_advantages;
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::student::{BackpropPath, RolloutMode, Student};
use crate::surrogate::{
    delta_kl_from_predictions, model_means, posterior_means, sample_surrogate_batch,
    surrogate_loss, GroupRef, TimeSampling,
};
use crate::teacher::{denoising_loss_with, LossWeight, NoiseDraw};
use crate::trainer::{reward_input_grad, RewardDraw, RewardGradForm};

/// A deliberate defect injected into the checks, used to confirm that the
/// suites catch it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Negate the implemented ΔKL before it is compared.
    FlipDeltaKlSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub checks: usize,
    /// Largest observed error against the suite's tolerance.
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

/// Report schema version; bumped when fields change.
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub version: u32,
    pub passed: bool,
    pub fault: Fault,
    pub suites: Vec<SuiteResult>,
}

/// Names of the suites in report order.
pub const SUITES: [&str; 6] = [
    "finite_differences",
    "kernel_composition",
    "zero_sum_advantages",
    "markov_factorization",
    "jensen_bound",
    "delta_kl_closed_form",
];

/// Run every suite.
pub fn run_all(fault: Fault, seed: u64) -> Result<VerifyReport> {
    let key = StreamKey::new(seed).derive_str("verify");
    type Suite = fn(Fault, StreamKey) -> Result<(usize, f64, f64, String)>;
    let suites: [Suite; 6] = [
        finite_differences,
        kernel_composition,
        zero_sum_advantages,
        markov_factorization,
        jensen_bound,
        delta_kl_closed_form,
    ];
    let mut out = Vec::new();
    for (name, f) in SUITES.iter().zip(suites) {
        let start = Instant::now();
        let (checks, max_error, tolerance, detail) = f(fault, key.derive_str(name))?;
        let passed = max_error <= tolerance;
        log::info!(
            "verify {name}: {} (max error {max_error:.3e}, tol {tolerance:.1e})",
            if passed { "pass" } else { "FAIL" }
        );
        out.push(SuiteResult {
            name: (*name).into(),
            passed,
            checks,
            max_error,
            tolerance,
            seconds: start.elapsed().as_secs_f64(),
            detail,
        });
    }
    Ok(VerifyReport {
        version: REPORT_VERSION,
        passed: out.iter().all(|s| s.passed),
        fault,
        suites: out,
    })
}

fn tiny_denoiser(key: StreamKey, hidden: usize) -> Result<Denoiser> {
    let spec = MlpSpec {
        x_dim: 2,
        num_conditions: 2,
        hidden: vec![hidden],
        activation: Activation::Silu,
        t_max: 100,
    };
    let mut d = Denoiser::new(spec, 0.7, key)?;
    // Push weights away from zero so every path carries signal.
    for (_, t) in d.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v *= 3.0;
        }
    }
    Ok(d)
}

/// Largest relative error of `analytic` against central differences of
/// `f` over every parameter of `model`.
pub fn fd_check(
    model: &Denoiser,
    analytic: &Grads,
    f: impl Fn(&Denoiser) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let names: Vec<String> = model.params().names().cloned().collect();
    for name in names {
        let len = model.params().get(&name)?.len();
        let g = analytic.get(&name).unwrap_or(&[]).to_vec();
        for i in 0..len {
            let p = model.params().get(&name)?.data()[i];
            let h = 1e-3_f32 * p.abs().max(0.1);
            let (up, dn) = (p + h, p - h);
            let mut m = model.clone();
            m.params_mut().get_mut(&name)?.data_mut()[i] = up;
            let fp = f(&m)?;
            m.params_mut().get_mut(&name)?.data_mut()[i] = dn;
            let fm = f(&m)?;
            let fd = (fp - fm) / (f64::from(up) - f64::from(dn));
            let a = g.get(i).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(a, fd));
        }
    }
    Ok(worst)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn finite_differences(_: Fault, key: StreamKey) -> Result<(usize, f64, f64, String)> {
    let sched = NoiseSchedule::linear(100)?;
    let mut rng = key.derive_str("data").stream();
    let model = tiny_denoiser(key.derive_str("model"), 3)?;
    let n_params = model.params().total_count();
    let x0 = Matrix::new(6, 2, rng.normals(12))?;
    let c = vec![0, 1, 0, 1, 1, 0];
    let draw = NoiseDraw::sample(6, 2, 1, 100, &mut rng);
    let mut worst = Vec::new();

    let (_, g) = denoising_loss_with(&model, &sched, &x0, &c, &draw, LossWeight::UnitTarget, true)?;
    let e = fd_check(&model, &g.expect("requested"), |m| {
        Ok(denoising_loss_with(m, &sched, &x0, &c, &draw, LossWeight::UnitTarget, false)?.0)
    })?;
    worst.push(("denoising_loss", e));

    let student = Student::new(model.clone(), StepGrid::uniform(100, 2)?);
    let traj = student.rollout(
        &sched,
        &c,
        RolloutMode::Deterministic,
        key.derive_str("rollout"),
    )?;
    let v = Matrix::new(6, 2, rng.normals(12))?;
    let g = student.pullback(&sched, &traj, 0, &v, BackpropPath::FullPath)?;
    let e = fd_check(&model, &g, |m| {
        let s = Student::new(m.clone(), student.grid().clone());
        let mut gr = Graph::new();
        let b = m.bind(&mut gr, false);
        let x = s.generate_on(&mut gr, &b, &sched, &traj, 0, BackpropPath::FullPath)?;
        let val = gr.value(x);
        Ok(val
            .data
            .iter()
            .zip(&v.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / 6.0)
    })?;
    worst.push(("generator_pullback", e));

    let reference = tiny_denoiser(key.derive_str("reference"), 3)?;
    let rewards = [1.0, 0.0, 0.5, 0.0, 1.0, 0.2];
    let group = group_advantages(&rewards)?;
    let gref = GroupRef {
        traj: &traj,
        rewards: &group,
    };
    let batch = sample_surrogate_batch(
        &[gref],
        &[0, 1],
        student.grid(),
        &sched,
        1,
        TimeSampling::Uniform,
        &mut rng,
    )?
    .expect("non-degenerate");
    // A small temperature keeps the softplus away from saturation.
    let (_, g) = surrogate_loss(&model, &reference, &sched, &batch, 0.01, true)?;
    let e = fd_check(&model, &g.expect("requested"), |m| {
        Ok(surrogate_loss(m, &reference, &sched, &batch, 0.01, false)?.0)
    })?;
    worst.push(("surrogate_loss", e));

    // Reward input gradient against differences in x_{t_k}.
    let t_k = 50;
    let x_tk = Matrix::new(6, 2, rng.normals(12))?;
    let rdraw = RewardDraw::sample(6, 2, t_k, &sched, TimeSampling::Uniform, &mut rng)?;
    let analytic = reward_input_grad(
        &model,
        &reference,
        &sched,
        &x_tk,
        &c,
        t_k,
        0.01,
        &rdraw,
        RewardGradForm::ExpectedLogRatio,
    )?;
    let value = |x: &Matrix| -> Result<f64> {
        let mut x_t = Matrix::zeros(6, 2);
        for r in 0..6 {
            let k = sched.transition(t_k, rdraw.t[r])?;
            for j in 0..2 {
                x_t.data[r * 2 + j] = k.alpha * x.get(r, j) + k.sigma * rdraw.eps.get(r, j);
            }
        }
        let eta: Vec<f64> = rdraw
            .t
            .iter()
            .map(|&t| sched.posterior_eta(t, t_k))
            .collect::<Result<_>>()?;
        let x0p = model.predict(&sched, &x_t, &rdraw.t, &c)?;
        let x0r = reference.predict(&sched, &x_t, &rdraw.t, &c)?;
        let dk = delta_kl_from_predictions(&sched, &x_t, x, &rdraw.t, &[t_k; 6], &eta, &x0p, &x0r)?;
        Ok(dk
            .iter()
            .zip(&rdraw.weight)
            .map(|(d, w)| -0.01 * (100 - t_k) as f64 * w * d)
            .sum())
    };
    let mut e: f64 = 0.0;
    for i in 0..12 {
        let h = 1e-5;
        let mut xp = x_tk.clone();
        xp.data[i] += h;
        let mut xm = x_tk.clone();
        xm.data[i] -= h;
        let fd = (value(&xp)? - value(&xm)?) / (2.0 * h);
        e = e.max(rel_err(analytic.data[i], fd));
    }
    worst.push(("reward_input_grad", e));

    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        worst.len(),
        max,
        1e-3,
        format!("{n_params} parameters; {detail}"),
    ))
}

fn kernel_composition(_: Fault, key: StreamKey) -> Result<(usize, f64, f64, String)> {
    let sched = NoiseSchedule::linear(1000)?;
    let mut rng = key.stream();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..200 {
        let mut ts = [
            rng.int_inclusive(0, 1000),
            rng.int_inclusive(0, 1000),
            rng.int_inclusive(0, 1000),
        ];
        ts.sort_unstable();
        let [s, u, t] = ts;
        let a = sched.transition(s, u)?;
        let b = sched.transition(u, t)?;
        let ab = sched.transition(s, t)?;
        worst = worst.max((a.alpha * b.alpha - ab.alpha).abs());
        worst = worst.max(((b.alpha * a.sigma).powi(2) + b.sigma.powi(2) - ab.sigma.powi(2)).abs());
        checks += 1;
    }
    // With η → 0 the posterior step is the deterministic update.
    let mut eta_gap: f64 = 0.0;
    for _ in 0..200 {
        let t = rng.int_inclusive(2, 1000);
        let s = rng.int_inclusive(1, t - 1);
        let (da, db) = sched.ddim_coefficients(t, s)?;
        let (pa, pb) = sched.posterior_coefficients(t, s, 0, 1e-9)?;
        eta_gap = eta_gap.max((da - pa).abs()).max((db - pb).abs());
        checks += 1;
    }
    Ok((
        checks,
        worst.max(eta_gap),
        1e-6,
        format!("composition {worst:.2e}, eta->0 {eta_gap:.2e}"),
    ))
}

fn zero_sum_advantages(_: Fault, key: StreamKey) -> Result<(usize, f64, f64, String)> {
    let mut rng = key.stream();
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for i in 0..10_000 {
        let g = rng.int_inclusive(2, 32);
        let rewards: Vec<f64> = (0..g)
            .map(|_| {
                if i % 2 == 0 {
                    rng.uniform()
                } else {
                    f64::from(u8::from(rng.uniform() < 0.5))
                }
            })
            .collect();
        let grp = group_advantages(&rewards)?;
        if grp.degenerate {
            continue;
        }
        worst = worst.max(grp.weight_imbalance().abs());
        used += 1;
    }
    Ok((used, worst, 1e-9, format!("{used} non-degenerate groups")))
}

fn gauss_logpdf(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
    -sq / (2.0 * std * std) - x.len() as f64 * (std * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

fn markov_factorization(_: Fault, key: StreamKey) -> Result<(usize, f64, f64, String)> {
    let mut rng = key.stream();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        // x_3 → x_2 → x_1 → x_0 with affine Gaussian transitions.
        let coef: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (0.5 + rng.uniform(), rng.normal() * 0.3, 0.2 + rng.uniform()))
            .collect();
        let mut x = vec![rng.normals(2)];
        for &(a, b, s) in &coef {
            let prev = x.last().unwrap().clone();
            x.push(prev.iter().map(|v| a * v + b + s * rng.normal()).collect());
        }
        let mut sum_log = 0.0;
        let mut prod = 1.0;
        for (j, &(a, b, s)) in coef.iter().enumerate() {
            let mean: Vec<f64> = x[j].iter().map(|v| a * v + b).collect();
            let lp = gauss_logpdf(&x[j + 1], &mean, s);
            sum_log += lp;
            prod *= lp.exp();
        }
        worst = worst.max((sum_log - prod.ln()).abs());
    }
    Ok((100, worst, 1e-6, "3-step chains".into()))
}

/// Exact and Jensen-bound group objectives on one tiny instance with
/// affine clean-sample predictors, so that ΔKL is quadratic in `x_t`.
/// The exact objective `softplus(s·E[z])` takes `E` exhaustively over
/// `times` and exactly over `x_t`; the bound `E[softplus(s·z)]` is
/// estimated from `draws` independent per-member draws. Returns
/// `(exact, bound_mean, bound_standard_error)`.
pub fn jensen_instance(
    sched: &NoiseSchedule,
    rng: &mut NoiseStream,
    draws: usize,
    times: &[usize],
) -> Result<(f64, f64, f64)> {
    const G: usize = 4;
    let t_k = 0;
    let x_tk = Matrix::new(G, 2, rng.normals(2 * G))?;
    let rewards: Vec<f64> = (0..G).map(|_| rng.uniform()).collect();
    let signed = group_advantages(&rewards)?.signed_weights();
    let wp: Vec<f64> = rng.normals(6).iter().map(|v| 0.3 * v).collect();
    let wr: Vec<f64> = rng.normals(6).iter().map(|v| 0.3 * v).collect();
    let predict = |w: &[f64], x: &Matrix| {
        let mut o = Matrix::zeros(x.rows, 2);
        for r in 0..x.rows {
            let (a, b) = (x.get(r, 0), x.get(r, 1));
            o.data[2 * r] = w[0] * a + w[1] * b + w[2];
            o.data[2 * r + 1] = w[3] * a + w[4] * b + w[5];
        }
        o
    };
    // Per-member ΔKL at timesteps `t` and standard-normal offsets `eps`.
    let dkl = |t: &[usize], eps: &[f64]| -> Result<Vec<f64>> {
        let mut x_t = Matrix::zeros(G, 2);
        let mut eta = Vec::with_capacity(G);
        for r in 0..G {
            let k = sched.transition(t_k, t[r])?;
            for j in 0..2 {
                x_t.data[2 * r + j] = k.alpha * x_tk.get(r, j) + k.sigma * eps[2 * r + j];
            }
            eta.push(sched.posterior_eta(t[r], t_k)?);
        }
        delta_kl_from_predictions(
            sched,
            &x_t,
            &x_tk,
            t,
            &[t_k; G],
            &eta,
            &predict(&wp, &x_t),
            &predict(&wr, &x_t),
        )
    };
    let scale = 0.05 * (sched.t_max() - t_k) as f64;
    let softplus = |z: f64| {
        if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    };

    // For quadratic f and ε ~ N(0, I): E f = f(0) + ½Σ_j (f(e_j) + f(−e_j) − 2f(0)).
    let mut mean_z = 0.0;
    for &t in times {
        let ts = [t; G];
        let f0 = dkl(&ts, &[0.0; 2 * G])?;
        let mut e = f0.clone();
        for j in 0..2 {
            let mut plus = [0.0; 2 * G];
            let mut minus = [0.0; 2 * G];
            for r in 0..G {
                plus[2 * r + j] = 1.0;
                minus[2 * r + j] = -1.0;
            }
            let (fp, fm) = (dkl(&ts, &plus)?, dkl(&ts, &minus)?);
            for r in 0..G {
                e[r] += 0.5 * (fp[r] + fm[r] - 2.0 * f0[r]);
            }
        }
        mean_z += e.iter().zip(&signed).map(|(d, a)| d * a).sum::<f64>() / times.len() as f64;
    }

    let mut losses = Vec::with_capacity(draws);
    for _ in 0..draws {
        let t: Vec<usize> = (0..G).map(|_| times[rng.index(times.len())]).collect();
        let eps = rng.normals(2 * G);
        let z: f64 = dkl(&t, &eps)?.iter().zip(&signed).map(|(d, a)| d * a).sum();
        losses.push(softplus(scale * z));
    }
    let n = draws as f64;
    let bound = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - bound).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((softplus(scale * mean_z), bound, (var / n).sqrt()))
}

fn jensen_bound(_: Fault, key: StreamKey) -> Result<(usize, f64, f64, String)> {
    let sched = NoiseSchedule::linear(100)?;
    let mut rng = key.stream();
    let times: Vec<usize> = vec![10, 30, 50, 70, 90];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (exact, bound, se) = jensen_instance(&sched, &mut rng, 400, &times)?;
        // Violation beyond three standard errors.
        worst = worst.max((exact - bound - 3.0 * se).max(0.0));
    }
    Ok((100, worst, 0.0, "bound - exact >= -3 se".into()))
}

/// `KL(N(m1, s²) ‖ N(m2, s²))` in one dimension by the trapezoid rule.
pub fn kl_by_quadrature(m1: f64, m2: f64, s: f64) -> f64 {
    let n = 20_000;
    let (lo, hi) = (m1 - 12.0 * s, m1 + 12.0 * s);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let x = lo + h * i as f64;
        let lq = -(x - m1).powi(2) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let lp = -(x - m2).powi(2) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * lq.exp() * (lq - lp);
    }
    acc * h
}

fn delta_kl_closed_form(fault: Fault, key: StreamKey) -> Result<(usize, f64, f64, String)> {
    let sched = NoiseSchedule::linear(1000)?;
    let mut rng = key.stream();
    let mut worst: f64 = 0.0;
    let n = 50;
    for _ in 0..n {
        let t_k = rng.int_inclusive(0, 900);
        let t = rng.int_inclusive(t_k + 2, 1000);
        let eta = sched.posterior_eta(t, t_k)?;
        let x_tk = Matrix::new(1, 2, rng.normals(2))?;
        let x_t = Matrix::new(1, 2, rng.normals(2))?;
        let xp = Matrix::new(1, 2, rng.normals(2))?;
        let xr = Matrix::new(1, 2, rng.normals(2))?;
        let mut dk =
            delta_kl_from_predictions(&sched, &x_t, &x_tk, &[t], &[t_k], &[eta], &xp, &xr)?[0];
        if fault == Fault::FlipDeltaKlSign {
            dk = -dk;
        }
        let mq = posterior_means(&sched, &x_t, &x_tk, &[t], &[t_k], &[eta])?;
        let mp = model_means(&sched, &x_t, &xp, &[t], &[eta])?;
        let mr = model_means(&sched, &x_t, &xr, &[t], &[eta])?;
        let quad: f64 = (0..2)
            .map(|j| {
                kl_by_quadrature(mq.data[j], mp.data[j], eta)
                    - kl_by_quadrature(mq.data[j], mr.data[j], eta)
            })
            .sum();
        worst = worst.max((dk - quad).abs() / quad.abs().max(1.0));
    }
    Ok((n, worst, 1e-4, "closed form vs trapezoid quadrature".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let r = run_all(Fault::None, 0).unwrap();
        for s in &r.suites {
            assert!(s.passed, "{s:?}");
        }
        assert!(r.passed);
    }

    #[test]
    fn flipped_delta_kl_is_caught() {
        let r = run_all(Fault::FlipDeltaKlSign, 0).unwrap();
        assert!(!r.passed);
        let failing: Vec<&str> = r
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.as_str())
            .collect();
        assert_eq!(failing, ["delta_kl_closed_form"]);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let kl = kl_by_quadrature(0.0, 0.2, 1.0);
        assert!((kl - 0.02).abs() < 1e-9, "{kl}");
    }
}
