//! Dense tensors, a recorded tape with reverse-mode differentiation, MLP
//! building blocks and the RMSProp optimizer.

mod mlp;
mod optim;
mod tape;
mod tensor;

pub use mlp::{input_gradient_graph, input_jacobian, Activation, BoundMlp, ForwardTrace, Layer, Mlp};
pub use optim::{clip_weights, RmsPropState, DEFAULT_DECAY, DEFAULT_EPSILON, DEFAULT_LEARNING_RATE};
pub use tape::{Gradients, NodeId, Primitive, Tape, LOG_FLOOR, SQRT_EPS};
pub use tensor::Tensor;
