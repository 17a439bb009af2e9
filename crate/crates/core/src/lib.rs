pub mod absa;
pub mod autodiff;
pub mod cli;
pub mod backtest;
pub mod composite;
pub mod corpus;
pub mod error;
pub mod forecast;
pub mod matrix;
pub mod meso;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod vecstore;
pub mod wavelet;

pub use error::{Error, Result};
