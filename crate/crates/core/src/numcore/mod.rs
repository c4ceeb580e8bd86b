//! Dense tensors, reverse-mode autodiff and the optimization toolkit every
//! model in the crate is built on. All arithmetic is `f64`.

pub mod gaussian;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod serialize;
pub mod tensor;

pub use gaussian::{
    kl_diag_normal, kl_diag_normal_values, reparam_sample, reparam_with_noise, LOGVAR_MAX, LOGVAR_MIN,
};
pub use graph::{Gradients, Graph, MixtureBatch, Var, MIXTURE_EPS};
pub use nn::{Linear, Lstm};
pub use optim::{
    clip_grad_norm, Adam, AdamConfig, Bound, GradMap, Param, ParamKind, ParamStore, RmsProp,
    RmsPropConfig,
};
pub use tensor::Tensor;
