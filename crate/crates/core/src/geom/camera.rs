use crate::scalar::Real;

use super::vec::{Mat3, RigidTransform, Vec3};
use super::GeomError;

/// Semantic id for pixels with no surface hit.
pub const BACKGROUND_LABEL: u8 = 255;

/// Pinhole camera: intrinsics K, camera-to-world extrinsics, image size,
/// and the maximum depth used for coordinate normalization.
#[derive(Debug, Clone)]
pub struct Camera<T> {
    pub intrinsics: Mat3<T>,
    pub cam_to_world: RigidTransform<T>,
    pub width: usize,
    pub height: usize,
    pub max_depth: T,
}

impl<T: Real> Camera<T> {
    pub fn new(
        intrinsics: Mat3<T>,
        cam_to_world: RigidTransform<T>,
        width: usize,
        height: usize,
        max_depth: T,
    ) -> Result<Self, GeomError> {
        let k = &intrinsics.m;
        if k[1][0] != T::zero() || k[2][0] != T::zero() || k[2][1] != T::zero() {
            return Err(GeomError::InvalidCamera("K must be upper-triangular".to_string()));
        }
        if k[0][0] <= T::zero() || k[1][1] <= T::zero() {
            return Err(GeomError::InvalidCamera("focal lengths must be positive".to_string()));
        }
        if k[2][2] != T::one() {
            return Err(GeomError::InvalidCamera("K[2][2] must be 1".to_string()));
        }
        if max_depth <= T::zero() {
            return Err(GeomError::InvalidCamera("max_depth must be positive".to_string()));
        }
        Ok(Camera { intrinsics, cam_to_world, width, height, max_depth })
    }

    /// The 480x270 intrinsics used for all synthesized views.
    pub fn default_intrinsics() -> Mat3<T> {
        Mat3::from_rows(
            [T::cst(233.826), T::zero(), T::cst(239.5)],
            [T::zero(), T::cst(233.826), T::cst(134.5)],
            [T::zero(), T::zero(), T::one()],
        )
    }

    pub fn world_to_cam(&self) -> RigidTransform<T> {
        self.cam_to_world.inverse()
    }

    pub fn position(&self) -> Vec3<T> {
        self.cam_to_world.translation
    }

    /// Pixel coordinates (u, v) and camera depth of a camera-frame point.
    pub fn to_pixel(&self, p: Vec3<T>) -> (T, T, T) {
        let h = self.intrinsics.mul_vec(p);
        (h.x / p.z, h.y / p.z, p.z)
    }

    /// Perspective projection of camera-frame points into normalized
    /// 2.5D coordinates: pixel extents map affinely onto [-1,1]^2 and depth
    /// maps linearly onto [-1,1] via `max_depth`.
    pub fn project(&self, points: &[Vec3<T>]) -> Result<Vec<Vec3<T>>, GeomError> {
        let two = T::cst(2.0);
        let w = T::cst(self.width as f64);
        let h = T::cst(self.height as f64);
        points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if p.z <= T::zero() {
                    return Err(GeomError::PointBehindCamera { index: i, depth: p.z.to_f64_lossy() });
                }
                let (u, v, z) = self.to_pixel(p);
                Ok(Vec3::new(
                    two * u / w - T::one(),
                    two * v / h - T::one(),
                    two * z / self.max_depth - T::one(),
                ))
            })
            .collect()
    }

    /// Exact inverse of [`Camera::project`].
    pub fn unproject(&self, coords: &[Vec3<T>]) -> Result<Vec<Vec3<T>>, GeomError> {
        let two = T::cst(2.0);
        let one = T::one();
        let w = T::cst(self.width as f64);
        let h = T::cst(self.height as f64);
        let k = &self.intrinsics.m;
        let (fx, skew, cx) = (k[0][0], k[0][1], k[0][2]);
        let (fy, cy) = (k[1][1], k[1][2]);
        coords
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let limit = one + T::cst(1e-12);
                if c.x.abs() > limit || c.y.abs() > limit || c.z.abs() > limit {
                    return Err(GeomError::CoordOutOfRange { index: i });
                }
                let u = (c.x + one) / two * w;
                let v = (c.y + one) / two * h;
                let z = (c.z + one) / two * self.max_depth;
                let y = (v - cy) / fy * z;
                let x = ((u - cx) * z - skew * y) / fx;
                Ok(Vec3::new(x, y, z))
            })
            .collect()
    }
}

/// One virtual-camera observation: depth and semantics, row-major H x W.
/// Depth is 0 where no surface was hit; semantics use [`BACKGROUND_LABEL`]
/// there.
#[derive(Debug, Clone)]
pub struct SceneView<T> {
    pub depth: Vec<T>,
    pub semantics: Vec<u8>,
    pub camera: Camera<T>,
}

impl<T: Real> SceneView<T> {
    pub fn depth_at(&self, x: usize, y: usize) -> T {
        self.depth[y * self.camera.width + x]
    }

    pub fn label_at(&self, x: usize, y: usize) -> u8 {
        self.semantics[y * self.camera.width + x]
    }
}
