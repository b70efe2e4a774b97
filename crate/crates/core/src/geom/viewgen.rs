//! Virtual-camera synthesis: a room-spanning grid of candidate positions,
//! aimed at the body, jittered, then filtered by height, distance, and
//! pelvis visibility.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Real;

use super::camera::Camera;
use super::mesh::TriMesh;
use super::raster::rasterize_patch;
use super::vec::{Mat3, RigidTransform, Vec3};
use super::GeomError;

/// Matterport-40 category ids used to find floor and ceiling heights.
pub(crate) const FLOOR_CATEGORY: u8 = 2;
pub(crate) const CEILING_CATEGORY: u8 = 17;

#[derive(Debug, Clone)]
pub struct VirtualCameraConfig<T> {
    /// Std-dev of the Gaussian translation jitter (meters).
    pub noise_sigma: T,
    /// Acceptable camera-to-body distance band (meters).
    pub dist_min: T,
    pub dist_max: T,
    /// Horizontal grid pitch (meters).
    pub grid_step_xz: T,
    /// Vertical grid pitch (meters).
    pub grid_step_y: T,
    /// Half-width of the pelvis visibility patch (pixels).
    pub patch_half: usize,
    /// Slack subtracted from the pelvis depth before calling a pixel an
    /// occluder, so surfaces the body rests on do not count (meters).
    pub occlusion_slack: T,
    pub width: usize,
    pub height: usize,
    pub max_depth: T,
}

impl<T: Real> Default for VirtualCameraConfig<T> {
    fn default() -> Self {
        VirtualCameraConfig {
            noise_sigma: T::cst(0.15),
            dist_min: T::cst(1.65),
            dist_max: T::cst(6.5),
            grid_step_xz: T::cst(0.5),
            grid_step_y: T::cst(0.25),
            patch_half: 10,
            occlusion_slack: T::cst(0.05),
            width: 480,
            height: 270,
            max_depth: T::cst(10.0),
        }
    }
}

/// Floor and ceiling heights from semantic labels, falling back to the mesh
/// bounding box when labels are missing.
pub(crate) fn room_heights<T: Real>(scene: &TriMesh<T>) -> (T, T) {
    let (lo, hi) = scene.bbox();
    let mut floor = None;
    let mut ceiling = None;
    if let Some(labels) = &scene.labels {
        for (v, &l) in scene.vertices.iter().zip(labels) {
            if l == FLOOR_CATEGORY {
                floor = Some(floor.map_or(v.y, |f: T| f.min(v.y)));
            } else if l == CEILING_CATEGORY {
                ceiling = Some(ceiling.map_or(v.y, |c: T| c.max(v.y)));
            }
        }
    }
    (floor.unwrap_or(lo.y), ceiling.unwrap_or(hi.y))
}

/// Camera orientation: optical (Z) axis along `forward`, X parallel to the
/// ground plane, Y completing a right-handed, Y-down camera frame.
fn aim_rotation<T: Real>(forward: Vec3<T>) -> Mat3<T> {
    let up = Vec3::new(T::zero(), T::one(), T::zero());
    let z = forward.normalized();
    let mut x = z.cross(up);
    if x.norm() < T::cst(1e-6) {
        x = Vec3::new(T::one(), T::zero(), T::zero());
    } else {
        x = x.normalized();
    }
    let y = z.cross(x);
    Mat3::from_cols(x, y, z)
}

/// Generate up to `count` virtual cameras looking at `body_center`.
///
/// Candidates sit on a grid spanning the room, between the pelvis height and
/// the ceiling and above half the room height; each is aimed at the body,
/// then its translation is jittered with Gaussian noise. Survivors must
/// still lie in the height band, at distance within
/// [`VirtualCameraConfig::dist_min`, `dist_max`] of the body, and see the
/// pelvis patch unoccluded by scene geometry.
pub fn generate_virtual_cameras<T: Real>(
    scene: &TriMesh<T>,
    body_center: Vec3<T>,
    count: usize,
    seed: u64,
    cfg: &VirtualCameraConfig<T>,
) -> Result<Vec<Camera<T>>, GeomError> {
    if scene.is_empty() {
        return Err(GeomError::EmptyMesh);
    }
    let (lo, hi) = scene.bbox();
    let (floor_y, ceil_y) = room_heights(scene);
    let half_height = floor_y + (ceil_y - floor_y) * T::cst(0.5);
    let y_lo = body_center.y.max(half_height);
    let y_hi = ceil_y - T::cst(0.05);
    if y_lo >= y_hi {
        return Err(GeomError::NoValidCameras);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.noise_sigma.to_f64_lossy()).expect("sigma > 0");

    let steps = |a: T, b: T, step: T| -> Vec<T> {
        let n = (((b - a) / step).to_f64_lossy().floor() as usize).max(1);
        (0..=n).map(|i| a + step * T::cst(i as f64)).filter(|v| *v <= b).collect()
    };
    let margin = T::cst(0.05);
    let xs = steps(lo.x + margin, hi.x - margin, cfg.grid_step_xz);
    let zs = steps(lo.z + margin, hi.z - margin, cfg.grid_step_xz);
    let ys = steps(y_lo, y_hi, cfg.grid_step_y);

    let mut cameras = Vec::new();
    'grid: for &gy in &ys {
        for &gx in &xs {
            for &gz in &zs {
                let grid_pos = Vec3::new(gx, gy, gz);
                // Aim before jittering so bodies are not always centered.
                let forward = body_center - grid_pos;
                if forward.norm() < T::cst(1e-6) {
                    continue;
                }
                let rotation = aim_rotation(forward);
                let noise = Vec3::new(
                    T::cst(normal.sample(&mut rng)),
                    T::cst(normal.sample(&mut rng)),
                    T::cst(normal.sample(&mut rng)),
                );
                let pos = grid_pos + noise;
                let camera = Camera::new(
                    Camera::default_intrinsics(),
                    RigidTransform::new(rotation, pos)
                        .expect("aim rotation is orthonormal"),
                    cfg.width,
                    cfg.height,
                    cfg.max_depth,
                )?;
                if camera_ok(&camera, scene, body_center, y_lo, y_hi, cfg) {
                    cameras.push(camera);
                    if cameras.len() == count {
                        break 'grid;
                    }
                }
            }
        }
    }
    if cameras.is_empty() {
        return Err(GeomError::NoValidCameras);
    }
    Ok(cameras)
}

fn camera_ok<T: Real>(
    camera: &Camera<T>,
    scene: &TriMesh<T>,
    body_center: Vec3<T>,
    y_lo: T,
    y_hi: T,
    cfg: &VirtualCameraConfig<T>,
) -> bool {
    let pos = camera.position();
    if pos.y < y_lo || pos.y > y_hi {
        return false;
    }
    let dist = (pos - body_center).norm();
    if dist < cfg.dist_min || dist > cfg.dist_max {
        return false;
    }
    pelvis_unoccluded(camera, scene, body_center, cfg)
}

fn pelvis_unoccluded<T: Real>(
    camera: &Camera<T>,
    scene: &TriMesh<T>,
    body_center: Vec3<T>,
    cfg: &VirtualCameraConfig<T>,
) -> bool {
    let p_cam = camera.world_to_cam().apply(body_center);
    if p_cam.z <= T::zero() {
        return false;
    }
    let (u, v, z) = camera.to_pixel(p_cam);
    let (u, v) = (u.to_f64_lossy(), v.to_f64_lossy());
    let h = cfg.patch_half as f64;
    if u < h || v < h || u >= (cfg.width as f64 - h) || v >= (cfg.height as f64 - h) {
        return false;
    }
    let (px, py) = (u.floor() as usize, v.floor() as usize);
    let depths = rasterize_patch(scene, camera, px, py, cfg.patch_half);
    let limit = z - cfg.occlusion_slack;
    depths.iter().all(|&d| d == T::zero() || d >= limit)
}

/// Independent re-check of the four placement constraints for a generated
/// camera: X axis parallel to the ground, position inside the height band,
/// distance band respected, pelvis patch unoccluded. Used by tests and the
/// interaction synthesizer's self-audit.
pub fn recheck_camera_constraints<T: Real>(
    camera: &Camera<T>,
    scene: &TriMesh<T>,
    body_center: Vec3<T>,
    cfg: &VirtualCameraConfig<T>,
) -> Result<(), String> {
    let x_axis = camera.cam_to_world.rotation.col(0);
    if x_axis.y.abs() > T::cst(1e-9) {
        return Err(format!("camera X axis not parallel to ground: y={}", x_axis.y.to_f64_lossy()));
    }
    let (floor_y, ceil_y) = room_heights(scene);
    let half_height = floor_y + (ceil_y - floor_y) * T::cst(0.5);
    let y_lo = body_center.y.max(half_height);
    let pos = camera.position();
    if pos.y < y_lo || pos.y > ceil_y {
        return Err(format!("camera height {} outside [{}, {}]", pos.y.to_f64_lossy(), y_lo.to_f64_lossy(), ceil_y.to_f64_lossy()));
    }
    let dist = (pos - body_center).norm();
    if dist < cfg.dist_min || dist > cfg.dist_max {
        return Err(format!("camera-body distance {} outside band", dist.to_f64_lossy()));
    }
    if !pelvis_unoccluded(camera, scene, body_center, cfg) {
        return Err("pelvis patch occluded".to_string());
    }
    Ok(())
}
