//! Private SQL over an existing database.
//!
//! A query passes through static validation, mechanism planning, a budget
//! check against the ledger, per-user pre-aggregation on the backend,
//! Gaussian noise on the per-user sums, and the minimum frequency rule
//! before anything is returned. [`engine::Engine`] ties the stages together;
//! [`frontdoor`] exposes it on the command line and over HTTP.

pub mod accountant;
pub mod backend;
pub mod catalog;
pub mod engine;
pub mod eval;
pub mod frontdoor;
pub mod mechanisms;
pub mod sql;
pub mod thresholding;
pub mod validator;
pub mod value;

pub use value::Value;
