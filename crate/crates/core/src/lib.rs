//! Simulator for decentralized collaborative next-POI recommendation:
//! on-device self-attention recommenders that exchange perturbed weights
//! with geographical and semantic neighbors chosen by a server.

pub mod collab;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod neighbors;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod privacy;
pub mod recommender;
pub mod seed;

pub use error::{Error, Result};
