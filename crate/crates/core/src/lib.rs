pub mod config;
pub mod data;
pub mod dependence;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod io;
pub mod net;
pub mod optim;
pub mod par;
pub mod seeds;
pub mod synthetic;
pub mod transport;
pub mod upstream;

pub use error::{Error, Result};
