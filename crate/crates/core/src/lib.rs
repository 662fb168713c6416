//! Decentralized real-time energy trading on a radial distribution network.
//!
//! Load aggregators and generators are price-taking agents. A network
//! operator (DNO) runs primal-dual updates over a linearized AC power flow
//! and posts nodal prices and renewable risk penalties until the market
//! settles; a centralized solver checks the equilibrium against the
//! social-welfare optimum.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`).

pub mod aggregator;
pub mod appliance;
pub mod dno;
pub mod error;
pub mod generator;
pub mod grid;
pub mod linalg;
pub mod linpf;
pub mod market;
pub mod oracle;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Scenario64 = grid::Scenario<f64>;
pub type Scenario32 = grid::Scenario<f32>;
pub type AdmittanceBlocks64 = linpf::AdmittanceBlocks<f64>;
pub type AdmittanceBlocks32 = linpf::AdmittanceBlocks<f32>;
pub type SimulationResult64 = market::SimulationResult<f64>;
pub type CentralSolution64 = oracle::CentralSolution<f64>;
