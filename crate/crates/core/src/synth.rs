//! Procedural rooms and synthetic human-scene interaction pairs: the
//! training corpus for the scene-conditioned generator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{TriMesh, Vec3};
use crate::scalar::Real;

/// Matterport-40 category ids for the synthetic 12-category subset.
/// "desk" maps onto the generic furniture id and "misc" onto objects.
pub mod category {
    pub const WALL: u8 = 1;
    pub const FLOOR: u8 = 2;
    pub const CHAIR: u8 = 3;
    pub const DOOR: u8 = 4;
    pub const TABLE: u8 = 5;
    pub const CABINET: u8 = 7;
    pub const WINDOW: u8 = 9;
    pub const SOFA: u8 = 10;
    pub const BED: u8 = 11;
    pub const CEILING: u8 = 17;
    pub const DESK: u8 = 36;
    pub const MISC: u8 = 39;

    /// The synthetic subset in channel order (scene tensors one-hot over
    /// these).
    pub const SUBSET: [u8; 12] = [
        WALL, FLOOR, CEILING, BED, SOFA, CHAIR, TABLE, DESK, CABINET, DOOR, WINDOW, MISC,
    ];

    pub fn name(id: u8) -> &'static str {
        match id {
            WALL => "wall",
            FLOOR => "floor",
            CHAIR => "chair",
            DOOR => "door",
            TABLE => "table",
            CABINET => "cabinet",
            WINDOW => "window",
            SOFA => "sofa",
            BED => "bed",
            CEILING => "ceiling",
            DESK => "desk",
            MISC => "misc",
            _ => "other",
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("furniture {index} ({category}) extends outside the room")]
    FurnitureOutsideRoom { index: usize, category: String },
    #[error("furniture {a} and {b} overlap by {volume:.4} m^3")]
    FurnitureOverlap { a: usize, b: usize, volume: f64 },
    #[error("room has no {0} region for placement")]
    NoRegion(&'static str),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}

/// Which way a furniture piece faces (used when seating bodies on it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Facing {
    PosX,
    NegX,
    PosZ,
    NegZ,
}

impl Facing {
    pub fn direction<T: Real>(self) -> Vec3<T> {
        match self {
            Facing::PosX => Vec3::new(T::one(), T::zero(), T::zero()),
            Facing::NegX => Vec3::new(-T::one(), T::zero(), T::zero()),
            Facing::PosZ => Vec3::new(T::zero(), T::zero(), T::one()),
            Facing::NegZ => Vec3::new(T::zero(), T::zero(), -T::one()),
        }
    }

    pub fn yaw(self) -> f64 {
        match self {
            Facing::PosZ => 0.0,
            Facing::PosX => std::f64::consts::FRAC_PI_2,
            Facing::NegZ => std::f64::consts::PI,
            Facing::NegX => -std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Axis-aligned furniture box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Furniture {
    pub category: u8,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub facing: Facing,
}

impl Furniture {
    pub fn top_height(&self) -> f64 {
        self.max[1]
    }

    pub fn footprint_center(&self) -> (f64, f64) {
        (
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }
}

/// A seeded rectangular room: floor at y = 0, gravity along -y.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoomSpec {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    pub furniture: Vec<Furniture>,
    pub seed: u64,
}

impl RoomSpec {
    pub fn empty(width: f64, depth: f64, height: f64, seed: u64) -> Self {
        RoomSpec { width, depth, height, furniture: Vec::new(), seed }
    }
}

/// One labeled quad (its own 4 vertices, 2 triangles) so adjacent surfaces
/// keep distinct labels.
fn quad<T: Real>(mesh: &mut TriMesh<T>, corners: [Vec3<T>; 4], label: u8, flip: bool) {
    let base = mesh.vertices.len();
    mesh.vertices.extend_from_slice(&corners);
    if let Some(l) = mesh.labels.as_mut() {
        l.extend_from_slice(&[label; 4]);
    }
    if flip {
        mesh.faces.push([base, base + 2, base + 1]);
        mesh.faces.push([base, base + 3, base + 2]);
    } else {
        mesh.faces.push([base, base + 1, base + 2]);
        mesh.faces.push([base, base + 2, base + 3]);
    }
}

/// Closed axis-aligned box of 6 labeled quads. `inward` winds the faces
/// toward the interior (rooms); otherwise they face outward (furniture).
pub fn axis_aligned_box<T: Real>(min: Vec3<T>, max: Vec3<T>, label: u8, inward: bool) -> TriMesh<T> {
    axis_aligned_box_labeled(min, max, [label; 6], inward)
}

/// Per-face labels ordered: floor (y-), ceiling (y+), z-, z+, x-, x+.
pub fn axis_aligned_box_labeled<T: Real>(
    min: Vec3<T>,
    max: Vec3<T>,
    labels: [u8; 6],
    inward: bool,
) -> TriMesh<T> {
    let mut mesh = TriMesh { vertices: Vec::new(), faces: Vec::new(), labels: Some(Vec::new()) };
    let p = Vec3::new;
    let (a, b) = (min, max);
    // Outward-facing winding per face; `inward` flips.
    quad(&mut mesh, [p(a.x, a.y, a.z), p(a.x, a.y, b.z), p(b.x, a.y, b.z), p(b.x, a.y, a.z)], labels[0], inward);
    quad(&mut mesh, [p(a.x, b.y, a.z), p(b.x, b.y, a.z), p(b.x, b.y, b.z), p(a.x, b.y, b.z)], labels[1], inward);
    quad(&mut mesh, [p(a.x, a.y, a.z), p(b.x, a.y, a.z), p(b.x, b.y, a.z), p(a.x, b.y, a.z)], labels[2], inward);
    quad(&mut mesh, [p(a.x, a.y, b.z), p(a.x, b.y, b.z), p(b.x, b.y, b.z), p(b.x, a.y, b.z)], labels[3], inward);
    quad(&mut mesh, [p(a.x, a.y, a.z), p(a.x, b.y, a.z), p(a.x, b.y, b.z), p(a.x, a.y, b.z)], labels[4], inward);
    quad(&mut mesh, [p(b.x, a.y, a.z), p(b.x, a.y, b.z), p(b.x, b.y, b.z), p(b.x, b.y, a.z)], labels[5], inward);
    mesh
}

/// Test helper: a cube room with side `s`, inward normals, standard labels.
pub fn unit_cube_room<T: Real>(s: f64) -> TriMesh<T> {
    let side = T::cst(s);
    axis_aligned_box_labeled(
        Vec3::zero(),
        Vec3::new(side, side, side),
        [
            category::FLOOR,
            category::CEILING,
            category::WALL,
            category::WALL,
            category::WALL,
            category::WALL,
        ],
        true,
    )
}

fn overlap_volume(a: &Furniture, b: &Furniture) -> f64 {
    let mut v = 1.0;
    for ax in 0..3 {
        let lo = a.min[ax].max(b.min[ax]);
        let hi = a.max[ax].min(b.max[ax]);
        if hi <= lo {
            return 0.0;
        }
        v *= hi - lo;
    }
    v
}

/// Closed box room (floor, ceiling, 4 walls, inward normals) plus labeled
/// furniture boxes. Deterministic for a given spec.
pub fn synth_room<T: Real>(spec: &RoomSpec) -> Result<TriMesh<T>, SynthError> {
    const OVERLAP_TOLERANCE: f64 = 1e-6;
    for (i, f) in spec.furniture.iter().enumerate() {
        let inside = f.min[0] >= -1e-9
            && f.min[1] >= -1e-9
            && f.min[2] >= -1e-9
            && f.max[0] <= spec.width + 1e-9
            && f.max[1] <= spec.height + 1e-9
            && f.max[2] <= spec.depth + 1e-9
            && (0..3).all(|ax| f.max[ax] > f.min[ax]);
        if !inside {
            return Err(SynthError::FurnitureOutsideRoom {
                index: i,
                category: category::name(f.category).to_string(),
            });
        }
        for (j, g) in spec.furniture.iter().enumerate().skip(i + 1) {
            let v = overlap_volume(f, g);
            if v > OVERLAP_TOLERANCE {
                return Err(SynthError::FurnitureOverlap { a: i, b: j, volume: v });
            }
        }
    }

    let mut mesh = axis_aligned_box_labeled(
        Vec3::zero(),
        Vec3::new(T::cst(spec.width), T::cst(spec.height), T::cst(spec.depth)),
        [
            category::FLOOR,
            category::CEILING,
            category::WALL,
            category::WALL,
            category::WALL,
            category::WALL,
        ],
        true,
    );
    for f in &spec.furniture {
        let fm = axis_aligned_box(
            Vec3::new(T::cst(f.min[0]), T::cst(f.min[1]), T::cst(f.min[2])),
            Vec3::new(T::cst(f.max[0]), T::cst(f.max[1]), T::cst(f.max[2])),
            f.category,
            false,
        );
        mesh.append(&fm);
    }
    Ok(mesh)
}

// ---- interaction synthesis ----

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::body::{body_mesh, BodyParams, BodyTemplate};
use crate::data::Split;
use crate::diff::{adam_step, AdamState, Graph, Tensor};
use crate::geom::{
    generate_virtual_cameras, rasterize, Mat3, RigidTransform, SceneView, SdfGrid,
    VirtualCameraConfig,
};

/// One synthesized training pair: a rendered view and the camera-frame body
/// observed in it.
#[derive(Debug, Clone)]
pub struct InteractionSample {
    pub view: SceneView<f64>,
    pub body: BodyParams<f64>,
    pub scene_id: String,
    pub split: Split,
}

/// Per-sample physical requirements every emitted sample must satisfy.
pub const MIN_NON_COLLISION: f64 = 0.98;

/// How far support contacts are pushed into the surface so the contact test
/// is robust to interpolation (meters).
const CONTACT_PENETRATION: f64 = 0.006;

/// Pose latent whose decoded rotations bend the hips forward and the knees
/// back into a sitting pose, found by fitting the template's decoder.
pub fn sit_pose_latent(template: &BodyTemplate<f64>) -> [f64; 32] {
    // Target axis-angle components: hips to -pi/2 about X, knees to +pi/2.
    let mut target = vec![0.0f64; 66];
    let mut weight = vec![0.05f64; 66];
    for (joint, value) in [(6usize, -1.5f64), (7, -1.5), (8, 1.5), (9, 1.5)] {
        target[joint * 3] = value;
        weight[joint * 3] = 1.0;
    }
    let mut theta = Tensor::from_vec(vec![0.0f64; 32]);
    let mut adam = AdamState::new(0.05, &[&[32]]);
    for _ in 0..400 {
        let mut g: Graph<f64> = Graph::new();
        let th = g.param(theta.clone());
        let a = g.constant(template.pose_decoder.clone());
        let scaled = g.scale(th, template.decoder_gain);
        let act = g.tanh(scaled);
        let col = g.reshape(act, &[32, 1]).unwrap();
        let decoded = g.matmul(a, col).unwrap();
        let flat = g.reshape(decoded, &[66]).unwrap();
        let t = g.constant(Tensor::from_vec(target.clone()));
        let w = g.constant(Tensor::from_vec(weight.clone()));
        let d = g.sub(flat, t).unwrap();
        let d2 = g.square(d);
        let wd = g.mul(d2, w).unwrap();
        let loss = g.sum(wd);
        let grads = g.backward(loss).unwrap();
        let grad = grads.get(th).unwrap().clone();
        adam_step(&mut [&mut theta], &[grad], &["theta"], &mut adam).unwrap();
    }
    let mut out = [0.0f64; 32];
    out.copy_from_slice(theta.values());
    out
}

#[derive(Clone, Copy)]
enum Mode {
    Stand,
    Sit(usize),
    Lie(usize),
}

fn sit_supports(spec: &RoomSpec) -> Vec<usize> {
    spec.furniture
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            matches!(f.category, category::BED | category::SOFA | category::CHAIR)
                && (0.25..=0.8).contains(&f.top_height())
        })
        .map(|(i, _)| i)
        .collect()
}

fn lie_supports(spec: &RoomSpec) -> Vec<usize> {
    spec.furniture
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            f.category == category::BED
                && (f.max[0] - f.min[0]).max(f.max[2] - f.min[2]) >= 1.8
                && (f.max[0] - f.min[0]).min(f.max[2] - f.min[2]) >= 0.7
        })
        .map(|(i, _)| i)
        .collect()
}

fn free_floor_spot(spec: &RoomSpec, rng: &mut ChaCha12Rng) -> Option<(f64, f64)> {
    const BODY_RADIUS: f64 = 0.35;
    for _ in 0..64 {
        let x = rng.random_range(BODY_RADIUS + 0.1..spec.width - BODY_RADIUS - 0.1);
        let z = rng.random_range(BODY_RADIUS + 0.1..spec.depth - BODY_RADIUS - 0.1);
        let clear = spec.furniture.iter().all(|f| {
            x < f.min[0] - BODY_RADIUS
                || x > f.max[0] + BODY_RADIUS
                || z < f.min[2] - BODY_RADIUS
                || z > f.max[2] + BODY_RADIUS
        });
        if clear {
            return Some((x, z));
        }
    }
    None
}

fn yaw_matrix(yaw: f64) -> Mat3<f64> {
    let (s, c) = yaw.sin_cos();
    Mat3::from_rows([c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c])
}

/// Rotation lying on the back: the body's back (-z) faces the floor.
fn lie_rotation(yaw: f64) -> Mat3<f64> {
    let rx = Mat3::from_rows([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]);
    yaw_matrix(yaw).mul_mat(&rx)
}

fn rot6d_from_matrix(m: &Mat3<f64>) -> [f64; 6] {
    let a = m.col(0);
    let b = m.col(1);
    [a.x, a.y, a.z, b.x, b.y, b.z]
}

struct Placement {
    rotation: Mat3<f64>,
    translation: Vec3<f64>,
    params_local: BodyParams<f64>,
}

/// World pose for a body so the given part set rests `CONTACT_PENETRATION`
/// into a support plane at `support_y`, centered at (x, z).
fn place_on_support(
    template: &BodyTemplate<f64>,
    params_local: BodyParams<f64>,
    rotation: Mat3<f64>,
    x: f64,
    z: f64,
    support_y: f64,
) -> Option<Placement> {
    let local = body_mesh(&params_local, template).ok()?;
    let mut min_y = f64::INFINITY;
    let mut cx = 0.0;
    let mut cz = 0.0;
    for v in &local.vertices {
        let w = rotation.mul_vec(*v);
        min_y = min_y.min(w.y);
        cx += w.x;
        cz += w.z;
    }
    let n = local.vertices.len() as f64;
    let translation = Vec3::new(
        x - cx / n,
        support_y - CONTACT_PENETRATION - min_y,
        z - cz / n,
    );
    Some(Placement { rotation, translation, params_local })
}

fn small_normal(rng: &mut ChaCha12Rng, sd: f64) -> f64 {
    sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Heuristic placements (standing on free floor, sitting on supports, lying
/// on beds), jittered, paired with a surviving virtual camera, and expressed
/// as camera-frame body parameters. Every emitted sample passes the
/// physical checks (non-collision >= 0.98, contact). Returns fewer than `n`
/// samples when placement or camera generation keeps failing.
#[allow(clippy::too_many_arguments)]
pub fn synth_interactions(
    spec: &RoomSpec,
    mesh: &TriMesh<f64>,
    sdf: &Arc<SdfGrid<f64>>,
    template: &BodyTemplate<f64>,
    scene_id: &str,
    split: Split,
    n: usize,
    seed: u64,
    cam_cfg: &VirtualCameraConfig<f64>,
) -> Result<Vec<InteractionSample>, SynthError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ spec.seed.rotate_left(17));
    let sit = sit_supports(spec);
    let lie = lie_supports(spec);
    let sit_latent = sit_pose_latent(template);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let max_attempts = n * 12 + 64;

    while out.len() < n && attempts < max_attempts {
        attempts += 1;
        let roll: f64 = rng.random_range(0.0..1.0);
        let mode = if !sit.is_empty() && roll < 0.4 {
            Mode::Sit(sit[rng.random_range(0..sit.len())])
        } else if !lie.is_empty() && roll < 0.55 {
            Mode::Lie(lie[rng.random_range(0..lie.len())])
        } else {
            Mode::Stand
        };

        let mut params = BodyParams::<f64>::default();
        for b in params.beta.iter_mut() {
            *b = small_normal(&mut rng, 0.18).clamp(-0.6, 0.6);
        }
        for h in params.theta_h.iter_mut() {
            *h = small_normal(&mut rng, 0.08);
        }

        let placement = match mode {
            Mode::Stand => {
                let Some((x, z)) = free_floor_spot(spec, &mut rng) else { continue };
                for (i, t) in params.theta_b.iter_mut().enumerate() {
                    *t = small_normal(&mut rng, if i % 3 == 0 { 0.15 } else { 0.09 });
                }
                let yaw = rng.random_range(0.0..std::f64::consts::TAU);
                place_on_support(template, params.clone(), yaw_matrix(yaw), x, z, 0.0)
            }
            Mode::Sit(fi) => {
                let f = &spec.furniture[fi];
                let (cx, cz) = f.footprint_center();
                let dir = f.facing.direction::<f64>();
                let half = 0.5 * ((f.max[0] - f.min[0]) * dir.x.abs() + (f.max[2] - f.min[2]) * dir.z.abs());
                let x = cx + dir.x * (half - 0.22) + small_normal(&mut rng, 0.06);
                let z = cz + dir.z * (half - 0.22) + small_normal(&mut rng, 0.06);
                for (t, s) in params.theta_b.iter_mut().zip(&sit_latent) {
                    *t = s + small_normal(&mut rng, 0.06);
                }
                let yaw = f.facing.yaw() + small_normal(&mut rng, 0.25);
                place_on_support(template, params.clone(), yaw_matrix(yaw), x, z, f.top_height())
            }
            Mode::Lie(fi) => {
                let f = &spec.furniture[fi];
                let (cx, cz) = f.footprint_center();
                let along_x = (f.max[0] - f.min[0]) >= (f.max[2] - f.min[2]);
                let base_yaw = if along_x { std::f64::consts::FRAC_PI_2 } else { 0.0 };
                for t in params.theta_b.iter_mut() {
                    *t = small_normal(&mut rng, 0.05);
                }
                let yaw = base_yaw + small_normal(&mut rng, 0.1);
                place_on_support(
                    template,
                    params.clone(),
                    lie_rotation(yaw),
                    cx + small_normal(&mut rng, 0.05),
                    cz + small_normal(&mut rng, 0.05),
                    f.top_height(),
                )
            }
        };
        let Some(p) = placement else { continue };

        // Physical self-check against the room SDF.
        let local = match body_mesh(&p.params_local, template) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let world = RigidTransform::new(p.rotation, p.translation).expect("yaw/lie rotations are rigid");
        let mut free = 0usize;
        let mut contact = false;
        for v in &local.vertices {
            let (value, _, _) = sdf.sample(world.apply(*v));
            if value > 0.0 {
                free += 1;
            } else {
                contact = true;
            }
        }
        let non_collision = free as f64 / local.vertices.len() as f64;
        if !contact || non_collision < MIN_NON_COLLISION {
            continue;
        }

        // Pair with a virtual camera aimed at the pelvis.
        let pelvis_local = template.rest_joints[0];
        let pelvis_world = world.apply(Vec3::new(pelvis_local.x, pelvis_local.y, pelvis_local.z));
        let cam_seed = seed ^ (out.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempts as u64;
        let cams = match generate_virtual_cameras(mesh, pelvis_world, 6, cam_seed, cam_cfg) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let cam = cams[rng.random_range(0..cams.len())].clone();
        let view = rasterize(mesh, &cam);

        // Express the world pose in the camera frame.
        let w2c = cam.cam_to_world.inverse();
        let r_cam = w2c.rotation.mul_mat(&p.rotation);
        let t_cam = w2c.apply(p.translation);
        let mut body = p.params_local.clone();
        body.rot6d = rot6d_from_matrix(&r_cam);
        body.translation = [t_cam.x, t_cam.y, t_cam.z];

        out.push(InteractionSample {
            view,
            body,
            scene_id: scene_id.to_string(),
            split,
        });
    }
    Ok(out)
}
