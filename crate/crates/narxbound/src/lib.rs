//! Certified ellipsoidal output bounds for ReLU NARX estimators, with a
//! model-based anomaly detector tuned by a provable false-alarm bound.
//!
//! The pipeline: simulate a plant with Gaussian sensor noise, train a small
//! ReLU network to predict the next measurement from a window of past
//! measurements, certify an ellipsoid that contains every network output
//! reachable while each windowed measurement varies inside its confidence
//! ellipsoid, and raise an alarm whenever the next measurement leaves the
//! Minkowski sum of that prediction bound and the noise confidence set.
//!
//! Start with the runnable examples (`cargo run --example <name>`); the
//! `narxbound` binary wires the same library calls into reproducible
//! experiment runs.

pub mod certify;
pub mod detector;
pub mod ellipsoid;
pub mod error;
pub mod experiment;
pub mod net;
pub mod plant;
pub mod qc;
pub mod sdp;

pub use error::{Error, Result};
