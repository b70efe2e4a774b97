//! Procedural differentiable articulated body: parameters to a posed,
//! shaped, skinned mesh.

mod params;
mod part;
mod rig;
mod template;

pub use params::BodyParams;
pub use part::PartLabel;
pub use rig::{
    body_mesh, build_body_graph, build_rot6d_transpose, pose_decode, rot6d_to_matrix,
    world_verts_graph, BodyGraphRefs,
};
pub use template::{
    build_template, contact_vertices, read_template, write_template, BodyTemplate,
    DEFAULT_CONTACT_PARTS, JOINT_COUNT, POSE_JOINTS, TEMPLATE_MAGIC, TEMPLATE_VERSION,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("degenerate 6D rotation input: {0}")]
    Degenerate6D(String),
    #[error("expected {expected} values for {what}, got {got}")]
    BadLength { what: &'static str, expected: usize, got: usize },
    #[error("unknown part label '{0}'; vocabulary: {vocab}", vocab = PartLabel::VOCABULARY.join(", "))]
    UnknownPart(String),
    #[error("non-finite body parameters")]
    NonFinite,
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error("{format}: {detail}")]
    Format { format: &'static str, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl BodyError {
    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        BodyError::Format { format, detail: detail.into() }
    }
}
