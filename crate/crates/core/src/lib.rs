//! Synthetic multi-view affordance grounding on sparse voxel structures.

pub mod flow;
pub mod geometry;
pub mod heatmap;
pub mod metrics;
pub mod netcore;
pub mod pipeline;
pub mod render;
pub mod synthscene;
pub mod voxel;
