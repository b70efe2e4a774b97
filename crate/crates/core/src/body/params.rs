use crate::scalar::Real;

use super::BodyError;

pub const TRANSLATION_DIM: usize = 3;
pub const ROT6D_DIM: usize = 6;
pub const SHAPE_DIM: usize = 10;
pub const POSE_LATENT_DIM: usize = 32;
pub const HAND_DIM: usize = 24;
/// Total feature length: translation, 6D rotation, shape, pose latent,
/// hand pose.
pub const BODY_FEATURE_DIM: usize =
    TRANSLATION_DIM + ROT6D_DIM + SHAPE_DIM + POSE_LATENT_DIM + HAND_DIM;

/// The 75-dimensional body feature (camera frame): translation t, 6D
/// rotation, 10 shape coefficients, 32 pose-latent coefficients, 24
/// hand-pose coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams<T> {
    pub translation: [T; TRANSLATION_DIM],
    pub rot6d: [T; ROT6D_DIM],
    pub beta: [T; SHAPE_DIM],
    pub theta_b: [T; POSE_LATENT_DIM],
    pub theta_h: [T; HAND_DIM],
}

impl<T: Real> Default for BodyParams<T> {
    /// Rest pose at the origin, 6D rotation set to the identity.
    fn default() -> Self {
        let mut rot6d = [T::zero(); ROT6D_DIM];
        rot6d[0] = T::one();
        rot6d[4] = T::one();
        BodyParams {
            translation: [T::zero(); TRANSLATION_DIM],
            rot6d,
            beta: [T::zero(); SHAPE_DIM],
            theta_b: [T::zero(); POSE_LATENT_DIM],
            theta_h: [T::zero(); HAND_DIM],
        }
    }
}

impl<T: Real> BodyParams<T> {
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(BODY_FEATURE_DIM);
        v.extend_from_slice(&self.translation);
        v.extend_from_slice(&self.rot6d);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.theta_b);
        v.extend_from_slice(&self.theta_h);
        v
    }

    pub fn from_flat(values: &[T]) -> Result<Self, BodyError> {
        if values.len() != BODY_FEATURE_DIM {
            return Err(BodyError::BadLength {
                what: "body feature vector",
                expected: BODY_FEATURE_DIM,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BodyError::NonFinite);
        }
        let mut p = BodyParams::default();
        p.translation.copy_from_slice(&values[0..3]);
        p.rot6d.copy_from_slice(&values[3..9]);
        p.beta.copy_from_slice(&values[9..19]);
        p.theta_b.copy_from_slice(&values[19..51]);
        p.theta_h.copy_from_slice(&values[51..75]);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}
