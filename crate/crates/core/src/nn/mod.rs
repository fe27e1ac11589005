//! Small CPU neural-network engine: layers, soft-label cross-entropy,
//! exact backpropagation and first-order optimizers, all in `f64`.

pub mod label;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use label::SoftLabel;
pub use layers::{LayerSpec, Mode};
pub use loss::{cross_entropy_loss, softmax};
pub use model::{Architecture, Forward, Gradient, Model};
pub use optim::{optimizer_step, OptimizerSpec, OptimizerState};
pub use params::{Layout, ParamVector};
pub use tensor::Tensor;
