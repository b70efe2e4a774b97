//! Geometry: meshes, cameras, projection, rasterization, virtual-camera
//! synthesis, and signed distance fields.

mod camera;
mod mesh;
mod nn;
mod ply;
mod raster;
mod sdf;
mod vec;
mod viewgen;
mod viewio;

pub use camera::{Camera, SceneView, BACKGROUND_LABEL};
pub use mesh::TriMesh;
pub use nn::{NearestDistOp, PointGrid};
pub use ply::{read_mesh, read_obj, read_ply, write_ply, write_ply_colored};
pub use raster::{rasterize, rasterize_patch};
pub use sdf::{compute_sdf, read_sdf, write_sdf, SdfGrid, SdfSampleOp, SDF_MAGIC, SDF_VERSION};
pub use vec::{Mat3, RigidTransform, Vec3};
pub use viewgen::{generate_virtual_cameras, recheck_camera_constraints, VirtualCameraConfig};
pub use viewio::{read_view_bundle, write_view_bundle};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point {index} has non-positive depth {depth}; cannot project")]
    PointBehindCamera { index: usize, depth: f64 },
    #[error("coordinate {index} outside [-1,1]^3")]
    CoordOutOfRange { index: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("transform is not rigid: {0}")]
    NonRigidTransform(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("no virtual camera satisfied all constraints; relax the distance band or grid")]
    NoValidCameras,
    #[error(
        "{inconsistent} of {total} SDF nodes have inconsistent ray parity; \
         the mesh is too open for sign queries, provide watertight input"
    )]
    OpenMesh { inconsistent: usize, total: usize },
    #[error("{format}: {detail}")]
    Format { format: &'static str, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GeomError {
    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        GeomError::Format { format, detail: detail.into() }
    }
}
