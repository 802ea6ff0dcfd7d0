//! Selective sensor fusion at desk scale.
//!
//! The crate pairs a small reverse-mode autodiff engine ([`tensor`]) with the
//! layers ([`nn`]) and fusion strategies ([`fusion`]) needed to train
//! two-modality odometry models on synthetic data ([`simulator`]), corrupt
//! that data ([`degradation`]), and score the results ([`geometry`],
//! [`harness`], [`report`]).

pub mod cli;
pub mod degradation;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod report;
pub mod simulator;
pub mod tensor;
