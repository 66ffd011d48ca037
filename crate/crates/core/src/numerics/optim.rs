//! Adam and exponential moving averages over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam. Moments are stored in f32 like the parameters, so
/// the state checkpoints through the same container.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        AdamState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Apply one update in place. Rejects non-finite gradients, naming the
    /// first offending tensor, before touching any state.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        self.m.check_same_layout(params, "adam moments")?;
        for (name, t) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingTensor(format!("gradient for {name}")))?;
            if g.len() != t.len() {
                return Err(Error::Shape {
                    context: format!("gradient for {name}"),
                    expected: t.shape().to_vec(),
                    actual: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient for {name}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (name, t) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let mi = beta1 * f64::from(m[i]) + (1.0 - beta1) * g[i];
                let vi = beta2 * f64::from(v[i]) + (1.0 - beta2) * g[i] * g[i];
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *p = (f64::from(*p) - update) as f32;
            }
        }
        Ok(())
    }
}

/// Shadow copy tracking `decay·shadow + (1 − decay)·live`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: ParamStore,
    decay: f64,
}

impl EmaState {
    pub fn new(initial: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("ema decay {decay} outside [0, 1]")));
        }
        Ok(EmaState {
            shadow: initial.clone(),
            decay,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        self.shadow.check_same_layout(live, "ema update")?;
        let d = self.decay;
        for ((_, s), (_, l)) in self.shadow.iter_mut().zip(live.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
                *a = (d * f64::from(*a) + (1.0 - d) * f64::from(b)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn store(vals: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    fn grads(vals: &[f64]) -> Grads {
        let mut g = Grads::default();
        g.insert("w", vals.to_vec());
        g
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[0.5, -0.5, 2.0]);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &p);
        adam.step(&mut p, &grads(&[3.0, -1e-3, 0.25])).unwrap();
        let got = p.get("w").unwrap().data();
        let want = [0.49, -0.49, 1.99];
        for (g, w) in got.iter().zip(want) {
            assert!((f64::from(*g) - w).abs() < 1e-6, "{g} vs {w}");
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[0.5, -0.5]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &grads(&[0.0, 0.0])).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut p = store(&[0.5]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &grads(&[f64::NAN])).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn ema_limits_and_two_step_recursion() {
        let live = store(&[2.0]);
        let mut e = EmaState::new(&store(&[0.0]), 1.0).unwrap();
        e.update(&live).unwrap();
        assert_eq!(e.shadow.get("w").unwrap().data(), &[0.0]);

        let mut e = EmaState::new(&store(&[0.0]), 0.0).unwrap();
        e.update(&live).unwrap();
        assert_eq!(e.shadow.get("w").unwrap().data(), &[2.0]);

        let mut e = EmaState::new(&store(&[0.0]), 0.5).unwrap();
        e.update(&live).unwrap();
        e.update(&live).unwrap();
        let mut oracle = 0.0f64;
        for _ in 0..2 {
            oracle = 0.5 * oracle + 0.5 * 2.0;
        }
        assert_eq!(oracle, 1.5);
        assert_eq!(f64::from(e.shadow.get("w").unwrap().data()[0]), oracle);

        assert!(EmaState::new(&live, 1.5).is_err());
        assert!(EmaState::new(&live, -0.1).is_err());
    }

    #[test]
    fn ema_fixed_point() {
        let live = store(&[0.3, -7.25, 1e-3]);
        let mut e = EmaState::new(&live, 0.995).unwrap();
        e.update(&live).unwrap();
        assert_eq!(e.shadow, live);
    }
}
