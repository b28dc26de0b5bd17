pub mod cascade;
pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gray;
pub mod init;
mod linalg;
pub mod pose_net;
pub mod pose_solver;

pub use error::{Error, Result};
