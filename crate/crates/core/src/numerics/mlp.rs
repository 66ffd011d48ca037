//! Conditional multilayer perceptron.
//!
//! Input rows are `[x, time features, one-hot condition]`. Time is mapped
//! through `t/T` into sin/cos pairs at frequencies `π·2^j`, `j = 0..3`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::StreamKey;
use crate::numerics::tensor::{Grads, Matrix, ParamStore, Tensor};

/// Number of sinusoidal time features.
pub const TIME_FEATURES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

/// Architecture description; everything needed to rebuild the parameter
/// layout of an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub x_dim: usize,
    pub num_conditions: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Terminal timestep used to normalize `t`.
    pub t_max: usize,
}

impl MlpSpec {
    pub fn input_width(&self) -> usize {
        self.x_dim + TIME_FEATURES + self.num_conditions
    }

    /// Widths from input to output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_width()];
        s.extend_from_slice(&self.hidden);
        s.push(self.x_dim);
        s
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Time features for one timestep.
pub fn time_features(t: f64, t_max: usize) -> [f64; TIME_FEATURES] {
    let u = t / t_max as f64;
    let mut f = [0.0; TIME_FEATURES];
    for j in 0..TIME_FEATURES / 2 {
        let w = std::f64::consts::PI * f64::from(1u32 << j);
        f[2 * j] = (w * u).sin();
        f[2 * j + 1] = (w * u).cos();
    }
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamStore,
}

/// Parameters of an [`Mlp`] placed on a graph, one `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Leaves in parameter-store order.
    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

fn weight_name(i: usize) -> String {
    format!("layer{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("layer{i}.bias")
}

impl Mlp {
    /// Random initialization: weights `N(0, 1/fan_in)`, biases zero.
    pub fn new(spec: MlpSpec, key: StreamKey) -> Result<Self> {
        if spec.x_dim == 0 || spec.t_max == 0 {
            return Err(Error::invalid("mlp needs x_dim > 0 and t_max > 0"));
        }
        if spec.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let mut params = ParamStore::new();
        let mut rng = key.stream();
        for (i, w) in spec.layer_sizes().windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| (rng.normal() * std) as f32)
                .collect();
            params.insert(weight_name(i), Tensor::new(vec![fan_in, fan_out], data)?)?;
            params.insert(bias_name(i), Tensor::zeros(vec![fan_out]))?;
        }
        Ok(Mlp { spec, params })
    }

    /// Rebuild from a stored parameter set, checking the layout.
    pub fn from_params(spec: MlpSpec, params: ParamStore) -> Result<Self> {
        let template = Mlp::new(spec.clone(), StreamKey::new(0))?;
        template
            .params
            .check_same_layout(&params, "Mlp::from_params")?;
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.spec.layer_sizes()
    }

    fn num_layers(&self) -> usize {
        self.spec.hidden.len() + 1
    }

    /// Zero the output layer so the network starts as the constant 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.num_layers() - 1;
        for name in [weight_name(last), bias_name(last)] {
            if let Ok(t) = self.params.get_mut(&name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Scale the output layer weights, e.g. to start close to zero.
    pub fn scale_output_layer(&mut self, s: f32) {
        let last = self.num_layers() - 1;
        if let Ok(t) = self.params.get_mut(&weight_name(last)) {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    /// Place the parameters on `g`. Trainable parameters become
    /// differentiable leaves; otherwise constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let mats: Vec<Matrix> = self.params.iter().map(|(_, t)| t.to_matrix()).collect();
        self.bind_matrices(g, mats, trainable)
            .expect("parameter layout checked at construction")
    }

    /// Place explicit f64 parameter values (in store order) on `g`.
    pub fn bind_matrices(
        &self,
        g: &mut Graph,
        mats: Vec<Matrix>,
        trainable: bool,
    ) -> Result<BoundMlp> {
        if mats.len() != 2 * self.num_layers() {
            return Err(Error::invalid(format!(
                "expected {} parameter matrices, got {}",
                2 * self.num_layers(),
                mats.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut it = mats.into_iter();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            let (w, b) = if trainable {
                (g.leaf(w), g.leaf(b))
            } else {
                (g.constant(w), g.constant(b))
            };
            layers.push((w, b));
        }
        Ok(BoundMlp { layers })
    }

    /// Constant `[time features, one-hot]` block for a batch.
    pub fn context_features(&self, t: &[f64], c: &[usize]) -> Result<Matrix> {
        if t.len() != c.len() {
            return Err(Error::Shape {
                context: "mlp context".into(),
                expected: vec![t.len()],
                actual: vec![c.len()],
            });
        }
        let width = TIME_FEATURES + self.spec.num_conditions;
        let mut m = Matrix::zeros(t.len(), width);
        for (r, (&tr, &cr)) in t.iter().zip(c).enumerate() {
            if !(1.0..=self.spec.t_max as f64).contains(&tr) {
                return Err(Error::invalid(format!(
                    "timestep {tr} outside [1, {}]",
                    self.spec.t_max
                )));
            }
            if self.spec.num_conditions > 0 && cr >= self.spec.num_conditions {
                return Err(Error::invalid(format!(
                    "condition {cr} out of range ({} conditions)",
                    self.spec.num_conditions
                )));
            }
            let row = m.row_mut(r);
            row[..TIME_FEATURES].copy_from_slice(&time_features(tr, self.spec.t_max));
            if self.spec.num_conditions > 0 {
                row[TIME_FEATURES + cr] = 1.0;
            }
        }
        Ok(m)
    }

    /// Forward pass on the graph.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        x: Var,
        t: &[f64],
        c: &[usize],
    ) -> Result<Var> {
        let xv = g.value(x);
        if xv.cols != self.spec.x_dim || xv.rows != t.len() {
            return Err(Error::Shape {
                context: "mlp input".into(),
                expected: vec![t.len(), self.spec.x_dim],
                actual: vec![xv.rows, xv.cols],
            });
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite("mlp input".into()));
        }
        let ctx = g.constant(self.context_features(t, c)?);
        let mut h = g.concat_cols(&[x, ctx])?;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            let z = g.add_bias(z, b)?;
            h = if i == last {
                z
            } else {
                match self.spec.activation {
                    Activation::Tanh => g.tanh(z),
                    Activation::Silu => g.silu(z),
                }
            };
            if !g.value(h).is_finite() {
                return Err(Error::NonFinite(format!("mlp layer {i}")));
            }
        }
        Ok(h)
    }

    /// Inference without gradient tracking.
    pub fn forward(&self, x: &Matrix, t: &[f64], c: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward_bound(&mut g, &bound, xv, t, c)?;
        Ok(g.value(out).clone())
    }

    /// Collect gradients for `bound` (which must be trainable) into a
    /// [`Grads`] keyed by parameter name.
    pub fn grads(&self, g: &Graph, bound: &BoundMlp, loss: Var) -> Result<Grads> {
        let leaves = bound.leaves();
        let mats = g.backward(loss, &leaves)?;
        Ok(self.grads_from_matrices(mats))
    }

    pub fn grads_from_matrices(&self, mats: Vec<Matrix>) -> Grads {
        let mut out = Grads::default();
        for ((name, _), m) in self.params.iter().zip(mats) {
            out.insert(name.clone(), m.data);
        }
        out
    }

    /// Parameters as f64 matrices in store order.
    pub fn param_matrices(&self) -> Vec<Matrix> {
        self.params.iter().map(|(_, t)| t.to_matrix()).collect()
    }
}
