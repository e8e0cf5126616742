//! Transferable multi-service traffic forecasting at the network edge.
//!
//! The library clusters services by Wasserstein distance (WK-means), groups
//! edge nodes into cohorts that define a model-transfer scope, trains a
//! transformer-based multi-service forecaster (TMTPN) per service cluster at
//! each cohort's reference node, and evaluates how well those models transfer
//! to the remaining cohort members.

pub mod clustering;
pub mod data;
pub mod mat;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tmtpn;
