//! Cameras, rasterized visibility, distance grids, rays and near-surface
//! sampling.

mod camera;
mod distance;
pub mod mesh;
mod raster;
mod rays;
mod sampler;

pub use camera::{
    cameras_to_string, load_cameras, parse_cameras, save_cameras, Camera, CameraRecord, Projection,
};
pub use distance::{build_distance_grid, DistanceGrid};
pub use raster::{
    rasterize, rasterize_visibility, raycast_visibility, VisibilityConfig, ZBuffer, NO_FACE,
};
pub use rays::{generate_rays, ray_box, Ray};
pub use sampler::{surface_guided_sample, RaySamples};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("invalid distance grid: {0}")]
    Grid(String),
    #[error("camera file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
