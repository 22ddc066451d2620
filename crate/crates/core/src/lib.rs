//! Extremes of vector-valued Gaussian fields: generalized variance, Pickands-type constants,
//! and double-crossing asymptotics with Monte Carlo checks.

pub mod asymptotics;
pub mod constants;
pub mod error;
pub mod exponent;
pub mod linalg;
pub mod mcverify;
pub mod models;
pub mod normal;
pub mod qpp;
pub mod quad;
pub mod simulate;

pub use error::{Error, Result};
pub use exponent::Exponent;
pub use linalg::{BlockMatrix, SymMatrix};
pub use models::{CovModel, Correlation, DerivedData, ExpansionData};
pub use qpp::{solve_qpp, QppProblem, QppSolution};
