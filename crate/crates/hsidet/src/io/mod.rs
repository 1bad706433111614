//! Persistence and ingestion: weight container, model config, images,
//! annotations, and the synthetic toy dataset.

pub mod annotations;
pub mod config;
pub mod image;
pub mod toy;
pub mod weights;
