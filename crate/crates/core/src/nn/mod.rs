//! Dense tensors, reverse-mode differentiation, the encoder and Adam.

pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use encoder::{encoder_forward, EncoderConfig, EncoderModel, EncoderOutput, HeadKind, ModelInput};
pub use gradcheck::check_gradients;
pub use graph::{CustomOp, Gradients, Graph, ParamVars, Var};
pub use optim::OptimState;
pub use tensor::{ParamSet, Tensor};
