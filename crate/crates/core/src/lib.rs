pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod lpr;
pub mod mgbg;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod render;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
