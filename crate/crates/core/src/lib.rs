//! Rope-chain secondary dynamics for skinned cloth.

pub mod collision;
pub mod dataset;
pub mod engine;
pub mod experiments;
pub mod forces;
pub mod geometry;
pub mod io;
pub mod position;
pub mod refcloth;
pub mod rope;
pub mod scene;
