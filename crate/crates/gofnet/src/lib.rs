//! Logistic regression for binary networks with a blockwise residual
//! term, variational Bayes inference, model averaging over the number of
//! residual blocks, and a goodness-of-fit probability for the
//! constant-residual null model.
//!
//! The typical flow is:
//!
//! 1. load or simulate a [`graph::Network`];
//! 2. fit all block counts with [`vbem::fit_model`];
//! 3. turn the optimized bounds into a model posterior and fit
//!    probability with [`model_select::fit_result`];
//! 4. inspect the model-averaged residual surface through
//!    [`graphon::ResidualGraphon`].
//!
//! See the `examples/` directory for runnable end-to-end versions of each
//! step.

pub mod cli;
pub mod error;
pub mod graph;
pub mod graphon;
pub mod math;
pub mod model_select;
pub mod seeding;
pub mod simulate;
pub mod vbem;

pub use error::GofError;
