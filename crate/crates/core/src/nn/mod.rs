//! Parameter bookkeeping and the handful of differentiable building blocks
//! shared by the backbone, the fusion encoder and the objective heads.

pub mod ops;
mod params;

pub use params::{Init, ParamSpec, ParamStore, Scope, SpecBuilder, Weights};
