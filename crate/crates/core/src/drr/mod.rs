//! Digitally reconstructed radiographs of phantom volumes.

mod dataset;
mod grid;
mod image;
mod post;
mod render;

pub use dataset::{plan_dataset, render_combined, render_dataset, ruler_pixels, DatasetManifest, DatasetRow};
pub use grid::{pose_grid, GridConfig, Interval, PoseEnergy};
pub use image::{ImageMeta, RadiographImage, View};
pub use post::{common_target, compose_views, gaussian_blur, scale_coefficient, scale_normalize};
pub use render::{density_integrals, lut, render_projection};
