pub mod association;
pub mod background;
pub mod config;
pub mod geometry;
pub mod image;
pub mod io_formats;
pub mod pipeline;
pub mod posegraph;
pub mod raycast;
pub mod reloc;
pub mod segmentation;
pub mod synthworld;
pub mod tracking;
pub mod tsdf;
