//! Training and fitting loss terms, each built on the autodiff graph.
//!
//! The reconstruction, KL, and pose-norm terms drive generator training; the
//! contact (one-sided robust Chamfer) and collision (negative SDF
//! magnitude) terms tie bodies to scene geometry during both training and
//! refinement.

use std::sync::Arc;

use thiserror::Error;

use crate::diff::{Graph, TensorRef};
use crate::geom::{Camera, NearestDistOp, PointGrid, SdfGrid, SdfSampleOp};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("reconstruction loss: {which} translation has non-positive depth {z}")]
    TranslationBehindCamera { which: &'static str, z: f64 },
    #[error("contact loss: empty contact vertex set")]
    EmptyContactSet,
    #[error("contact loss: scene has no vertices")]
    EmptyScene,
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
}

/// Loss weights: the training weights of the total objective, the fitting
/// weights, and the Geman-McClure scale.
#[derive(Debug, Clone)]
pub struct LossWeights<T> {
    pub alpha_kl: T,
    pub alpha_vp: T,
    pub alpha_cont: T,
    pub alpha_coll: T,
    pub alpha_1: T,
    pub alpha_2: T,
    pub alpha_3: T,
    pub geman_sigma: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            alpha_kl: T::cst(0.1),
            alpha_vp: T::cst(0.001),
            alpha_cont: T::cst(0.001),
            alpha_coll: T::cst(0.01),
            alpha_1: T::cst(0.1),
            alpha_2: T::cst(0.5),
            alpha_3: T::cst(0.01),
            geman_sigma: T::cst(0.1),
        }
    }
}

/// Normalized 2.5D projection of a camera-frame point (3,) as graph nodes.
pub fn project_graph<T: Real>(
    g: &mut Graph<T>,
    point: TensorRef,
    camera: &Camera<T>,
    which: &'static str,
) -> Result<TensorRef, LossError> {
    let p = g.reshape(point, &[3])?;
    let z_val = g.value(p).values()[2];
    if z_val <= T::zero() {
        return Err(LossError::TranslationBehindCamera { which, z: z_val.to_f64_lossy() });
    }
    let k = &camera.intrinsics.m;
    let (fx, skew, cx) = (k[0][0], k[0][1], k[0][2]);
    let (fy, cy) = (k[1][1], k[1][2]);
    let two = T::cst(2.0);
    let w = T::cst(camera.width as f64);
    let h = T::cst(camera.height as f64);

    let x = g.slice(p, 0, 0, 1)?;
    let y = g.slice(p, 0, 1, 1)?;
    let z = g.slice(p, 0, 2, 1)?;
    let fxx = g.scale(x, fx);
    let sy = g.scale(y, skew);
    let cz = g.scale(z, cx);
    let t1 = g.add(fxx, sy)?;
    let u_num = g.add(t1, cz)?;
    let u = g.div(u_num, z)?;
    let fyy = g.scale(y, fy);
    let cyz = g.scale(z, cy);
    let v_num = g.add(fyy, cyz)?;
    let v = g.div(v_num, z)?;

    let un = g.scale(u, two / w);
    let un = g.add_scalar(un, -T::one());
    let vn = g.scale(v, two / h);
    let vn = g.add_scalar(vn, -T::one());
    let zn = g.scale(z, two / camera.max_depth);
    let zn = g.add_scalar(zn, -T::one());
    Ok(g.concat(&[un, vn, zn], 0)?)
}

fn mean_abs_diff<T: Real>(
    g: &mut Graph<T>,
    a: TensorRef,
    b: TensorRef,
) -> Result<TensorRef, LossError> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    Ok(g.mean(ad)?)
}

/// Reconstruction loss over a 75-feature pair: the global translation block
/// is compared both directly and after projection (averaged), the remaining
/// 72 features directly; each block uses the mean absolute difference.
pub fn loss_reconstruction<T: Real>(
    g: &mut Graph<T>,
    x_h: TensorRef,
    x_h_rec: TensorRef,
    camera: &Camera<T>,
) -> Result<TensorRef, LossError> {
    let x = g.reshape(x_h, &[75])?;
    let r = g.reshape(x_h_rec, &[75])?;
    let t = g.slice(x, 0, 0, 3)?;
    let t_rec = g.slice(r, 0, 0, 3)?;
    let local = g.slice(x, 0, 3, 72)?;
    let local_rec = g.slice(r, 0, 3, 72)?;

    let g_term = mean_abs_diff(g, t, t_rec)?;
    let pt = project_graph(g, t, camera, "reference")?;
    let pt_rec = project_graph(g, t_rec, camera, "reconstructed")?;
    let pg_term = mean_abs_diff(g, pt, pt_rec)?;
    let l_term = mean_abs_diff(g, local, local_rec)?;

    let global = g.add(g_term, pg_term)?;
    let global = g.scale(global, T::cst(0.5));
    Ok(g.add(global, l_term)?)
}

/// Closed-form KL divergence of a diagonal Gaussian from the standard
/// normal: 0.5 * sum(exp(lv) + mu^2 - 1 - lv).
pub fn loss_kl<T: Real>(
    g: &mut Graph<T>,
    mu: TensorRef,
    log_var: TensorRef,
) -> Result<TensorRef, LossError> {
    let e = g.exp(log_var);
    let m2 = g.square(mu);
    let s = g.add(e, m2)?;
    let s = g.add_scalar(s, -T::one());
    let s = g.sub(s, log_var)?;
    let total = g.sum(s);
    Ok(g.scale(total, T::cst(0.5)))
}

/// Squared norm of the reconstructed pose latent, pulling generated poses
/// toward the natural-pose region around zero.
pub fn loss_vposer<T: Real>(g: &mut Graph<T>, theta_b: TensorRef) -> TensorRef {
    let sq = g.square(theta_b);
    g.sum(sq)
}

/// Mean magnitude of negative signed distances over the body vertices.
/// Vertices in free space contribute nothing and receive zero gradient.
pub fn loss_collision<T: Real>(
    g: &mut Graph<T>,
    verts_world: TensorRef,
    sdf: Arc<SdfGrid<T>>,
) -> Result<TensorRef, LossError> {
    let s = g.custom(Arc::new(SdfSampleOp { grid: sdf }), &[verts_world])?;
    let a = g.abs(s);
    let neg2 = g.sub(a, s)?;
    let neg = g.scale(neg2, T::cst(0.5));
    Ok(g.mean(neg)?)
}

/// Geman-McClure on a plain value.
pub fn geman_mcclure<T: Real>(e: T, sigma: T) -> T {
    let s2 = sigma * sigma;
    e * e * s2 / (s2 + e * e)
}

/// Geman-McClure elementwise over graph values.
pub fn geman_mcclure_graph<T: Real>(
    g: &mut Graph<T>,
    e: TensorRef,
    sigma: T,
) -> Result<TensorRef, LossError> {
    let s2 = sigma * sigma;
    let e2 = g.square(e);
    let num = g.scale(e2, s2);
    let den = g.add_scalar(e2, s2);
    Ok(g.div(num, den)?)
}

/// One-sided robust Chamfer: sum over contact vertices of the
/// Geman-McClure-weighted distance to the nearest scene vertex. The nearest
/// neighbor is fixed per evaluation and the scene side is constant.
pub fn loss_contact<T: Real>(
    g: &mut Graph<T>,
    verts_world: TensorRef,
    contact_indices: Arc<Vec<usize>>,
    scene_points: Arc<PointGrid<T>>,
    sigma: T,
) -> Result<TensorRef, LossError> {
    if contact_indices.is_empty() {
        return Err(LossError::EmptyContactSet);
    }
    if scene_points.is_empty() {
        return Err(LossError::EmptyScene);
    }
    let picked = g.gather(verts_world, contact_indices)?;
    let d = g.custom(Arc::new(NearestDistOp { targets: scene_points }), &[picked])?;
    let rho = geman_mcclure_graph(g, d, sigma)?;
    Ok(g.sum(rho))
}

/// Total training objective: rec + a_kl KL + a_vp VPoser, plus the
/// human-scene terms only when the schedule has enabled them.
#[allow(clippy::too_many_arguments)]
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    rec: TensorRef,
    kl: TensorRef,
    vposer: TensorRef,
    contact: Option<TensorRef>,
    collision: Option<TensorRef>,
    weights: &LossWeights<T>,
    alpha_kl: T,
    hs_enabled: bool,
) -> Result<TensorRef, LossError> {
    let wkl = g.scale(kl, alpha_kl);
    let wvp = g.scale(vposer, weights.alpha_vp);
    let mut total = g.add(rec, wkl)?;
    total = g.add(total, wvp)?;
    if hs_enabled {
        if let Some(c) = contact {
            let wc = g.scale(c, weights.alpha_cont);
            total = g.add(total, wc)?;
        }
        if let Some(c) = collision {
            let wc = g.scale(c, weights.alpha_coll);
            total = g.add(total, wc)?;
        }
    }
    Ok(total)
}

/// Handles to the fitting objective and its reported components.
pub struct FittingLoss {
    pub total: TensorRef,
    pub deviation: TensorRef,
    pub contact: TensorRef,
    pub collision: TensorRef,
    pub vposer: TensorRef,
}

/// Refinement objective: mean absolute deviation from the generator output
/// plus weighted contact, collision, and pose-norm terms.
#[allow(clippy::too_many_arguments)]
pub fn loss_fitting<T: Real>(
    g: &mut Graph<T>,
    x_h: TensorRef,
    x_h_0: TensorRef,
    theta_b: TensorRef,
    verts_world: TensorRef,
    contact_indices: Arc<Vec<usize>>,
    scene_points: Arc<PointGrid<T>>,
    sdf: Arc<SdfGrid<T>>,
    weights: &LossWeights<T>,
) -> Result<FittingLoss, LossError> {
    let deviation = mean_abs_diff(g, x_h, x_h_0)?;
    let contact = loss_contact(g, verts_world, contact_indices, scene_points, weights.geman_sigma)?;
    let collision = loss_collision(g, verts_world, sdf)?;
    let vposer = loss_vposer(g, theta_b);
    let wc = g.scale(contact, weights.alpha_1);
    let wcol = g.scale(collision, weights.alpha_2);
    let wvp = g.scale(vposer, weights.alpha_3);
    let mut total = g.add(deviation, wc)?;
    total = g.add(total, wcol)?;
    total = g.add(total, wvp)?;
    Ok(FittingLoss { total, deviation, contact, collision, vposer })
}
