//! Numerical substrate: storage, reverse-mode differentiation, networks,
//! optimizers, checkpoints and seeded noise.

pub mod checkpoint;
pub mod graph;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, Var};
pub use mlp::{Activation, BoundMlp, Mlp, MlpSpec};
pub use optim::{AdamConfig, AdamState, EmaState};
pub use rng::{NoiseStream, StreamKey};
pub use tensor::{Grads, Matrix, ParamStore, Tensor};
