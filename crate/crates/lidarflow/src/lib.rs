//! LiDAR scene generation from range images: equirectangular geometry, a
//! range-image VAE, a flow-matching transformer with 3D feature alignment,
//! staged training with prior transfer, guided inference (inpainting and
//! scene mixing), and distributional evaluation metrics. Training and
//! evaluation data come from a procedural ray-cast world.

pub mod formats;
pub mod geometry;
pub mod knn;
pub mod metrics;
pub mod nn;
pub mod guidance;
pub mod rng;
pub mod sampler;
pub mod synthworld;
pub mod teacher;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod trainer;
pub mod vae;
pub mod flow;
