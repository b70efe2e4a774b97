//! Scene-conditioned generation of posed 3D human bodies.
//!
//! The pipeline: procedural rooms are rendered to per-view depth+semantic
//! maps, a conditional VAE learns a distribution of body parameters given a
//! view, and a geometry-aware optimizer refines each generated body against
//! the room's signed distance field so it rests in contact with the scene
//! without interpenetration.
//!
//! Numeric modules ([`diff`], [`geom`], [`body`], [`loss`]) are generic over
//! the scalar type via [`scalar::Real`]; the pipeline itself runs in f64, and
//! the aliases below fix that choice.

pub mod body;
pub mod config;
pub mod cvae;
pub mod data;
pub mod diff;
pub mod fit;
pub mod geom;
pub mod loss;
pub mod metrics;
pub mod scalar;
pub mod synth;

pub use scalar::Real;

/// Dense tensor over f64, the pipeline's working precision.
pub type Tensor = diff::Tensor<f64>;
/// Define-by-run autodiff graph over f64.
pub type Graph = diff::Graph<f64>;
/// Adam optimizer state over f64.
pub type AdamState = diff::AdamState<f64>;

pub type Vec3 = geom::Vec3<f64>;
pub type Mat3 = geom::Mat3<f64>;
pub type RigidTransform = geom::RigidTransform<f64>;
pub type Camera = geom::Camera<f64>;
pub type TriMesh = geom::TriMesh<f64>;
pub type SceneView = geom::SceneView<f64>;
pub type SdfGrid = geom::SdfGrid<f64>;

pub type BodyParams = body::BodyParams<f64>;
pub type BodyTemplate = body::BodyTemplate<f64>;

