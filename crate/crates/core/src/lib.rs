#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod instruct;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;


pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use nn::DimConfig;
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tensor::Tensor;
