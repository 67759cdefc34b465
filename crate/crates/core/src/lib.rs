pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod pfa;
pub mod pyramid;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result, TensorError};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Scalar, Tensor};
