//! Differentiable assembly: 75 parameters -> posed, shaped, skinned
//! camera-frame vertices, built on the autodiff graph so both training and
//! fitting can push gradients back into the parameters.

use crate::diff::{Graph, Tensor, TensorRef};
use crate::geom::{Mat3, RigidTransform, TriMesh, Vec3};
use crate::scalar::Real;

use super::params::BodyParams;
use super::template::{BodyTemplate, JOINT_COUNT, POSE_JOINTS};
use super::BodyError;

/// Handles into a body graph that loss terms need.
pub struct BodyGraphRefs {
    /// (V, 3) camera-frame vertices.
    pub verts_cam: TensorRef,
    /// (32) pose latent slice of the input feature.
    pub theta_b: TensorRef,
    /// (3) translation slice of the input feature.
    pub translation: TensorRef,
}

// Rodrigues coefficients as analytic functions of the squared angle, with
// series fallbacks so the rest pose is exact and gradients stay finite.
// a(s2) = sin(sqrt(s2))/sqrt(s2), b(s2) = (1 - cos(sqrt(s2)))/s2.

const SERIES_THRESHOLD: f64 = 1e-4;

fn rot_coeff_a<T: Real>(s2: T) -> T {
    if s2 < T::cst(SERIES_THRESHOLD) {
        T::one() - s2 / T::cst(6.0) + s2 * s2 / T::cst(120.0)
    } else {
        let theta = s2.sqrt();
        theta.sin() / theta
    }
}

fn rot_coeff_a_deriv<T: Real>(s2: T) -> T {
    if s2 < T::cst(SERIES_THRESHOLD) {
        -T::one() / T::cst(6.0) + s2 / T::cst(60.0) - s2 * s2 / T::cst(1680.0)
    } else {
        let theta = s2.sqrt();
        (theta * theta.cos() - theta.sin()) / (T::cst(2.0) * theta * theta * theta)
    }
}

fn rot_coeff_b<T: Real>(s2: T) -> T {
    if s2 < T::cst(SERIES_THRESHOLD) {
        T::cst(0.5) - s2 / T::cst(24.0) + s2 * s2 / T::cst(720.0)
    } else {
        let theta = s2.sqrt();
        (T::one() - theta.cos()) / s2
    }
}

fn rot_coeff_b_deriv<T: Real>(s2: T) -> T {
    if s2 < T::cst(SERIES_THRESHOLD) {
        -T::one() / T::cst(24.0) + s2 / T::cst(360.0) - s2 * s2 / T::cst(13440.0)
    } else {
        let theta = s2.sqrt();
        (theta * theta.sin() * T::cst(0.5) - T::one() + theta.cos()) / (s2 * s2)
    }
}

/// Axis-angle row (1,3) to a rotation matrix (3,3) via
/// R = I + a(s2) K + b(s2) K^2.
fn rodrigues_graph<T: Real>(g: &mut Graph<T>, w: TensorRef) -> Result<TensorRef, BodyError> {
    let wx = g.slice(w, 1, 0, 1)?;
    let wy = g.slice(w, 1, 1, 1)?;
    let wz = g.slice(w, 1, 2, 1)?;
    let sq = [g.square(wx), g.square(wy), g.square(wz)];
    let s01 = g.add(sq[0], sq[1])?;
    let s2 = g.add(s01, sq[2])?;
    let a_c = g.unary_map(s2, rot_coeff_a, rot_coeff_a_deriv);
    let b_c = g.unary_map(s2, rot_coeff_b, rot_coeff_b_deriv);

    let zero = g.constant(Tensor::zeros(&[1, 1]));
    let nwx = g.neg(wx);
    let nwy = g.neg(wy);
    let nwz = g.neg(wz);
    let r0 = g.concat(&[zero, nwz, wy], 1)?;
    let r1 = g.concat(&[wz, zero, nwx], 1)?;
    let r2 = g.concat(&[nwy, wx, zero], 1)?;
    let k = g.concat(&[r0, r1, r2], 0)?;
    let kk = g.matmul(k, k)?;
    let ka = g.mul(k, a_c)?;
    let kkb = g.mul(kk, b_c)?;
    let eye = g.constant(Tensor::new(&[3, 3], vec![
        T::one(), T::zero(), T::zero(),
        T::zero(), T::one(), T::zero(),
        T::zero(), T::zero(), T::one(),
    ])?);
    let ik = g.add(eye, ka)?;
    Ok(g.add(ik, kkb)?)
}

/// 6D rotation (Gram-Schmidt two-column) as graph nodes. Returns R^T (rows
/// are the orthonormal columns a, b, c), the layout mesh skinning wants for
/// row-vector times matrix products.
pub fn build_rot6d_transpose<T: Real>(
    g: &mut Graph<T>,
    r6: TensorRef,
) -> Result<TensorRef, BodyError> {
    if g.value(r6).numel() != 6 {
        return Err(BodyError::BadLength { what: "6D rotation", expected: 6, got: g.value(r6).numel() });
    }
    let r6 = g.reshape(r6, &[6])?;
    let a_raw = g.slice(r6, 0, 0, 3)?;
    let b_raw = g.slice(r6, 0, 3, 3)?;

    let a_sq = g.square(a_raw);
    let n2a = g.sum(a_sq);
    if g.value(n2a).item() < T::cst(1e-16) {
        return Err(BodyError::Degenerate6D("first triple has near-zero norm".to_string()));
    }
    let n2a = g.reshape(n2a, &[1])?;
    let na = g.sqrt(n2a);
    let a = g.div(a_raw, na)?;

    let ab = g.mul(a, b_raw)?;
    let dot = g.sum(ab);
    let dot = g.reshape(dot, &[1])?;
    let proj = g.mul(a, dot)?;
    let b_orth = g.sub(b_raw, proj)?;
    let b_sq = g.square(b_orth);
    let n2b = g.sum(b_sq);
    if g.value(n2b).item() < T::cst(1e-16) {
        return Err(BodyError::Degenerate6D(
            "second triple is parallel to the first".to_string(),
        ));
    }
    let n2b = g.reshape(n2b, &[1])?;
    let nb = g.sqrt(n2b);
    let b = g.div(b_orth, nb)?;

    let comp = |g: &mut Graph<T>, v: TensorRef, i: usize| g.slice(v, 0, i, 1);
    let (ax, ay, az) = (comp(g, a, 0)?, comp(g, a, 1)?, comp(g, a, 2)?);
    let (bx, by, bz) = (comp(g, b, 0)?, comp(g, b, 1)?, comp(g, b, 2)?);
    let aybz = g.mul(ay, bz)?;
    let azby = g.mul(az, by)?;
    let cx = g.sub(aybz, azby)?;
    let azbx = g.mul(az, bx)?;
    let axbz = g.mul(ax, bz)?;
    let cy = g.sub(azbx, axbz)?;
    let axby = g.mul(ax, by)?;
    let aybx = g.mul(ay, bx)?;
    let cz = g.sub(axby, aybx)?;
    let c = g.concat(&[cx, cy, cz], 0)?;

    let a_row = g.reshape(a, &[1, 3])?;
    let b_row = g.reshape(b, &[1, 3])?;
    let c_row = g.reshape(c, &[1, 3])?;
    Ok(g.concat(&[a_row, b_row, c_row], 0)?)
}

/// Plain (non-graph) 6D rotation for direct use.
pub fn rot6d_to_matrix<T: Real>(r: &[T; 6]) -> Result<Mat3<T>, BodyError> {
    let a_raw = Vec3::new(r[0], r[1], r[2]);
    if a_raw.norm() < T::cst(1e-8) {
        return Err(BodyError::Degenerate6D("first triple has near-zero norm".to_string()));
    }
    let a = a_raw.normalized();
    let b_raw = Vec3::new(r[3], r[4], r[5]);
    let b_orth = b_raw - a * a.dot(b_raw);
    if b_orth.norm() < T::cst(1e-8) {
        return Err(BodyError::Degenerate6D(
            "second triple is parallel to the first".to_string(),
        ));
    }
    let b = b_orth.normalized();
    let c = a.cross(b);
    Ok(Mat3::from_cols(a, b, c))
}

/// Plain pose decode: bounded linear map of the 32 latent coefficients to
/// per-joint axis-angle rotations for the 22 body joints.
pub fn pose_decode<T: Real>(template: &BodyTemplate<T>, theta_b: &[T]) -> Vec<Vec3<T>> {
    assert_eq!(theta_b.len(), 32);
    let d = template.pose_decoder.values();
    let mut act = [T::zero(); 32];
    for (a, &t) in act.iter_mut().zip(theta_b) {
        *a = (t * template.decoder_gain).tanh();
    }
    (0..POSE_JOINTS)
        .map(|j| {
            let mut out = [T::zero(); 3];
            for (axis, o) in out.iter_mut().enumerate() {
                let row = &d[(j * 3 + axis) * 32..(j * 3 + axis + 1) * 32];
                *o = row.iter().zip(&act).map(|(&m, &a)| m * a).sum();
            }
            Vec3::new(out[0], out[1], out[2])
        })
        .collect()
}

/// Build the full differentiable body: feature vector (75) to camera-frame
/// vertices (V,3).
pub fn build_body_graph<T: Real>(
    g: &mut Graph<T>,
    x_h: TensorRef,
    template: &BodyTemplate<T>,
) -> Result<BodyGraphRefs, BodyError> {
    if g.value(x_h).numel() != 75 {
        return Err(BodyError::BadLength { what: "body feature", expected: 75, got: g.value(x_h).numel() });
    }
    let v = template.vertex_count();
    let x = g.reshape(x_h, &[75])?;
    let translation = g.slice(x, 0, 0, 3)?;
    let r6 = g.slice(x, 0, 3, 6)?;
    let beta = g.slice(x, 0, 9, 10)?;
    let theta_b = g.slice(x, 0, 19, 32)?;
    let theta_h = g.slice(x, 0, 51, 24)?;

    // Shape blend: shaped = rest + beta . blendshapes.
    let rest = g.constant(template.rest_flat());
    let blend = g.constant(template.blendshapes.clone());
    let beta_row = g.reshape(beta, &[1, 10])?;
    let offsets = g.matmul(beta_row, blend)?;
    let shaped_flat = g.add(rest, offsets)?;
    let shaped = g.reshape(shaped_flat, &[v, 3])?;

    // Shaped joints follow the mesh through the regressor.
    let reg = g.constant(template.joint_regressor.clone());
    let joints = g.matmul(reg, shaped)?;

    // Pose latent to 22 axis-angle rows, hands to curl rows.
    let decoder = g.constant(template.pose_decoder.clone());
    let scaled = g.scale(theta_b, template.decoder_gain);
    let activated = g.tanh(scaled);
    let col = g.reshape(activated, &[32, 1])?;
    let decoded = g.matmul(decoder, col)?;
    let body_rotvecs = g.reshape(decoded, &[POSE_JOINTS, 3])?;

    let curl_w = g.constant(Tensor::new(&[1, 12], template.hand_curl_weights.clone())?);
    let th_l = g.slice(theta_h, 0, 0, 12)?;
    let th_r = g.slice(theta_h, 0, 12, 12)?;
    let th_l = g.reshape(th_l, &[12, 1])?;
    let th_r = g.reshape(th_r, &[12, 1])?;
    let curl_l = g.matmul(curl_w, th_l)?;
    let curl_r = g.matmul(curl_w, th_r)?;
    let zeros12 = g.constant(Tensor::zeros(&[1, 2]));
    let hand_l = g.concat(&[curl_l, zeros12], 1)?;
    let hand_r = g.concat(&[curl_r, zeros12], 1)?;
    let rotvecs = g.concat(&[body_rotvecs, hand_l, hand_r], 0)?;

    // Local rotations, then the kinematic chain.
    let mut local_rots = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let w = g.slice(rotvecs, 0, j, 1)?;
        local_rots.push(rodrigues_graph(g, w)?);
    }
    let mut world_rot: Vec<TensorRef> = Vec::with_capacity(JOINT_COUNT);
    let mut world_pos: Vec<TensorRef> = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let jpos = g.slice(joints, 0, j, 1)?;
        match template.parents[j] {
            None => {
                world_rot.push(local_rots[j]);
                world_pos.push(jpos);
            }
            Some(p) => {
                world_rot.push(g.matmul(world_rot[p], local_rots[j])?);
                let ppos = g.slice(joints, 0, p, 1)?;
                let d = g.sub(jpos, ppos)?;
                let dcol = g.reshape(d, &[3, 1])?;
                let moved = g.matmul(world_rot[p], dcol)?;
                let moved_row = g.reshape(moved, &[1, 3])?;
                world_pos.push(g.add(world_pos[p], moved_row)?);
            }
        }
    }

    // Per-joint skinning transforms [R_j | p_j - R_j j_rest] as (1,12) rows.
    let mut mats = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let jrow = g.slice(joints, 0, j, 1)?;
        let jcol = g.reshape(jrow, &[3, 1])?;
        let rj = g.matmul(world_rot[j], jcol)?;
        let prow = world_pos[j];
        let pcol = g.reshape(prow, &[3, 1])?;
        let tcol = g.sub(pcol, rj)?;
        let m34 = g.concat(&[world_rot[j], tcol], 1)?;
        mats.push(g.reshape(m34, &[1, 12])?);
    }
    let joint_mats = g.concat(&mats, 0)?;
    let weights = g.constant(template.skin_weights.clone());
    let per_vertex = g.matmul(weights, joint_mats)?;

    let vx = g.slice(shaped, 1, 0, 1)?;
    let vy = g.slice(shaped, 1, 1, 1)?;
    let vz = g.slice(shaped, 1, 2, 1)?;
    let mut out_cols = Vec::with_capacity(3);
    for row in 0..3 {
        let c0 = g.slice(per_vertex, 1, row * 4, 1)?;
        let c1 = g.slice(per_vertex, 1, row * 4 + 1, 1)?;
        let c2 = g.slice(per_vertex, 1, row * 4 + 2, 1)?;
        let c3 = g.slice(per_vertex, 1, row * 4 + 3, 1)?;
        let p0 = g.mul(c0, vx)?;
        let p1 = g.mul(c1, vy)?;
        let p2 = g.mul(c2, vz)?;
        let s01 = g.add(p0, p1)?;
        let s012 = g.add(s01, p2)?;
        out_cols.push(g.add(s012, c3)?);
    }
    let posed = g.concat(&out_cols, 1)?;

    // Global 6D rotation and translation.
    let rt = build_rot6d_transpose(g, r6)?;
    let rotated = g.matmul(posed, rt)?;
    let t_row = g.reshape(translation, &[1, 3])?;
    let t_all = g.broadcast(t_row, &[v, 3])?;
    let verts_cam = g.add(rotated, t_all)?;

    Ok(BodyGraphRefs { verts_cam, theta_b, translation })
}

/// Rigidly move camera-frame vertices into the world frame inside the graph
/// (gradients pass through).
pub fn world_verts_graph<T: Real>(
    g: &mut Graph<T>,
    verts_cam: TensorRef,
    cam_to_world: &RigidTransform<T>,
) -> Result<TensorRef, BodyError> {
    let v = g.value(verts_cam).shape()[0];
    let r = cam_to_world.rotation;
    // Row-vector convention: world = v * R^T + t.
    let rt = Tensor::new(&[3, 3], vec![
        r.m[0][0], r.m[1][0], r.m[2][0],
        r.m[0][1], r.m[1][1], r.m[2][1],
        r.m[0][2], r.m[1][2], r.m[2][2],
    ])?;
    let rt = g.constant(rt);
    let rotated = g.matmul(verts_cam, rt)?;
    let t = cam_to_world.translation;
    let t_row = g.constant(Tensor::new(&[1, 3], vec![t.x, t.y, t.z])?);
    let t_all = g.broadcast(t_row, &[v, 3])?;
    Ok(g.add(rotated, t_all)?)
}

/// Camera-frame mesh for a parameter vector (single forward evaluation).
pub fn body_mesh<T: Real>(
    params: &BodyParams<T>,
    template: &BodyTemplate<T>,
) -> Result<TriMesh<T>, BodyError> {
    if !params.is_finite() {
        return Err(BodyError::NonFinite);
    }
    let mut g: Graph<T> = Graph::new();
    let x = g.constant(Tensor::from_vec(params.to_flat()));
    let refs = build_body_graph(&mut g, x, template)?;
    let vals = g.value(refs.verts_cam).values();
    let vertices = vals
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    Ok(TriMesh { vertices, faces: template.faces.clone(), labels: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::template::build_template;
    use crate::diff::gradcheck;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn template() -> BodyTemplate<f64> {
        build_template(7)
    }

    #[test]
    fn rot6d_identity_and_scale_invariance() {
        let r: Mat3<f64> = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(r.orthonormality_error() < 1e-15);
        assert!((r.m[0][0] - 1.0).abs() < 1e-15 && (r.m[1][1] - 1.0).abs() < 1e-15);
        let scaled = rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.m[i][j] - scaled.m[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rot6d_random_inputs_give_rotations() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            match rot6d_to_matrix(&r) {
                Ok(m) => {
                    assert!(m.orthonormality_error() < 1e-9);
                    assert!((m.det() - 1.0).abs() < 1e-9);
                }
                Err(_) => {
                    // Degenerate draws are possible but must be flagged, not
                    // silently produce a bad matrix.
                }
            }
        }
    }

    #[test]
    fn rot6d_degenerate_rejected() {
        assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pose_decode_zero_is_rest_and_odd() {
        let t = template();
        let zero = pose_decode(&t, &[0.0; 32]);
        assert!(zero.iter().all(|v| v.norm() == 0.0));
        let latent: Vec<f64> = (0..32).map(|i| ((i as f64) * 0.37).sin()).collect();
        let neg: Vec<f64> = latent.iter().map(|v| -v).collect();
        let a = pose_decode(&t, &latent);
        let b = pose_decode(&t, &neg);
        for (x, y) in a.iter().zip(&b) {
            assert!((*x + *y).norm() < 1e-12);
        }
    }

    #[test]
    fn pose_decode_respects_joint_limits_under_sampling() {
        let t = template();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..100_000 {
            let latent: Vec<f64> = (0..32).map(|_| rng.random_range(-8.0..8.0)).collect();
            let rots = pose_decode(&t, &latent);
            for (j, r) in rots.iter().enumerate() {
                let lim = 0.9 * t.joint_limits[j] + 1e-9;
                assert!(
                    r.x.abs() <= lim && r.y.abs() <= lim && r.z.abs() <= lim,
                    "joint {j} exceeds limit: {:?}",
                    r
                );
            }
        }
    }

    #[test]
    fn zero_pose_with_translation_is_translated_rest_mesh() {
        let t = template();
        let mut p = BodyParams::<f64>::default();
        p.translation = [0.3, -0.1, 2.0];
        let mesh = body_mesh(&p, &t).unwrap();
        for (out, rest) in mesh.vertices.iter().zip(&t.rest_vertices) {
            let expect = *rest + Vec3::new(0.3, -0.1, 2.0);
            assert!((*out - expect).norm() < 1e-9, "{out:?} vs {expect:?}");
        }
    }

    #[test]
    fn beta_axis_displacement_equals_blendshape() {
        let t = template();
        let mut p = BodyParams::<f64>::default();
        p.beta[0] = 1.0;
        let mesh = body_mesh(&p, &t).unwrap();
        let v = t.vertex_count();
        let b = t.blendshapes.values();
        for i in 0..v {
            let offset = Vec3::new(b[3 * i], b[3 * i + 1], b[3 * i + 2]);
            let got = mesh.vertices[i] - t.rest_vertices[i];
            assert!((got - offset).norm() < 2e-7, "vertex {i}: {got:?} vs {offset:?}");
        }
    }

    #[test]
    fn global_pose_is_equivariant() {
        let t = template();
        let mut local = BodyParams::<f64>::default();
        local.theta_b[4] = 0.8;
        local.theta_b[11] = -0.5;
        let base = body_mesh(&local, &t).unwrap();

        let mut posed = local.clone();
        posed.rot6d = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        posed.translation = [0.5, 1.0, -0.25];
        let moved = body_mesh(&posed, &t).unwrap();

        let r = rot6d_to_matrix(&posed.rot6d).unwrap();
        let rigid = RigidTransform::new(r, Vec3::new(0.5, 1.0, -0.25)).unwrap();
        let expected = base.transformed(&rigid);
        for (a, b) in moved.vertices.iter().zip(&expected.vertices) {
            assert!((*a - *b).norm() < 1e-9);
        }
    }

    #[test]
    fn vertex_gradients_match_finite_differences() {
        let t = template();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        // Random projection of the vertices makes a scalar loss.
        let v = t.vertex_count();
        let probe: Vec<f64> = (0..3 * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x0 = BodyParams::<f64>::default().to_flat();
        for x in x0.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        x0[5] += 1.0; // keep the 6D rotation well-conditioned

        let eval = |x: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let xh = g.constant(Tensor::from_vec(x.to_vec()));
            let refs = build_body_graph(&mut g, xh, &t).unwrap();
            g.value(refs.verts_cam)
                .values()
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };

        let mut g: Graph<f64> = Graph::new();
        let xh = g.param(Tensor::from_vec(x0.clone()));
        let refs = build_body_graph(&mut g, xh, &t).unwrap();
        let probe_t = g.constant(Tensor::new(&[v, 3], probe.clone()).unwrap());
        let prod = g.mul(refs.verts_cam, probe_t).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let ad = grads.get(xh).unwrap().values().to_vec();

        let coords: Vec<usize> = (0..75).step_by(3).collect();
        let fd = gradcheck::finite_diff_subset(&mut |x: &[f64]| eval(x), &x0, &coords, 1e-5);
        for (k, &c) in coords.iter().enumerate() {
            assert!(
                gradcheck::grads_close(ad[c], fd[k], 1e-4, 1e-7),
                "coord {c}: ad {} vs fd {}",
                ad[c],
                fd[k]
            );
        }
    }

    #[test]
    fn f32_template_builds_and_poses() {
        let t: BodyTemplate<f32> = build_template(7);
        let mesh = body_mesh(&BodyParams::<f32>::default(), &t).unwrap();
        assert_eq!(mesh.vertices.len(), 1024);
    }
}
