//! A minimal dense-tensor engine with reverse-mode differentiation: exactly
//! the operations the anisotropic U-Net needs, in f64, on the CPU.

pub mod graph;
pub mod init;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use graph::{
    activation_shapes, backward, channel_counts, forward, initialize_params, load_params,
    save_params, ForwardPass, Gradients, Graph, GraphBuilder, LayerKind, Mode, Node, ParamStore,
};
pub use init::glorot_normal;
pub use ops::{conv3d_forward, conv3d_strided_valid, deconv3d_forward, maxpool3d_forward, mse_loss};
pub use optim::{adam_step, AdamConfig};
pub use tensor::{NnError, Tensor5};
