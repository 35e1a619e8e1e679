//! Battery health analytics for cycle-aged cells.
//!
//! - [`ingest`]: delimited cycle logs and discharge traces, header role
//!   detection, windowed feature matrices
//! - [`synth`]: synthetic degradation data with known ground truth
//! - [`dva`]: differential voltage analysis (`dQ/dV`) and window capacities
//! - [`health`]: state of health, quadratic fade fit, end of life
//! - [`anomaly`]: robust deviation flagging and trace cleaning
//! - [`model`]: a small transformer regressor trained from scratch
//! - [`metrics`]: MSE / MAE / R², timing, comparison tables
//! - [`cli`]: the `lto-health` command-line front end
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doc-tests of this crate.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod cli;
pub mod dva;
pub mod health;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod synth;
mod util;



// Run the guide's listings as doc-tests, one module per chapter so a
// failure points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/dva.md")]
    mod dva {}
    #[doc = include_str!("../../../book/src/health.md")]
    mod health {}
    #[doc = include_str!("../../../book/src/anomaly.md")]
    mod anomaly {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
