use crate::scalar::Real;

use super::camera::{Camera, SceneView, BACKGROUND_LABEL};
use super::mesh::TriMesh;
use super::vec::Vec3;

/// Geometry closer than this (meters, camera frame) is clipped away.
const NEAR_PLANE: f64 = 0.01;

/// Z-buffered perspective rasterization of a world-frame mesh. Pixel-center
/// sampling, no antialiasing, no backface culling. Per-pixel semantics come
/// from the nearest vertex of the winning triangle; misses get depth 0 and
/// the background label.
pub fn rasterize<T: Real>(mesh: &TriMesh<T>, camera: &Camera<T>) -> SceneView<T> {
    let mut view = SceneView {
        depth: vec![T::zero(); camera.width * camera.height],
        semantics: vec![BACKGROUND_LABEL; camera.width * camera.height],
        camera: camera.clone(),
    };
    let mut zbuf = vec![T::infinity(); camera.width * camera.height];
    raster_into(mesh, camera, 0, 0, camera.width, camera.height, &mut |x, y, z, label| {
        let idx = y * camera.width + x;
        if z < zbuf[idx] {
            zbuf[idx] = z;
            view.depth[idx] = z;
            view.semantics[idx] = label;
        }
    });
    view
}

/// Depth of scene geometry over a small pixel window, for occlusion tests.
/// Returns the window's depth values row-major ((2*half+1)^2), 0 for misses.
/// `cx`/`cy` may be near the image border; out-of-image pixels stay 0.
pub fn rasterize_patch<T: Real>(
    mesh: &TriMesh<T>,
    camera: &Camera<T>,
    cx: usize,
    cy: usize,
    half: usize,
) -> Vec<T> {
    let x0 = cx.saturating_sub(half);
    let y0 = cy.saturating_sub(half);
    let x1 = (cx + half + 1).min(camera.width);
    let y1 = (cy + half + 1).min(camera.height);
    let side = 2 * half + 1;
    let mut depths = vec![T::zero(); side * side];
    let mut zbuf = vec![T::infinity(); side * side];
    raster_into(mesh, camera, x0, y0, x1, y1, &mut |x, y, z, _| {
        // x >= x0 >= cx - half, so x + half - cx cannot underflow.
        let lx = x + half - cx;
        let ly = y + half - cy;
        let i = ly * side + lx;
        if z < zbuf[i] {
            zbuf[i] = z;
            depths[i] = z;
        }
    });
    depths
}

/// Rasterize triangles over the pixel window [x0,x1)x[y0,y1), invoking
/// `emit(x, y, camera_depth, label)` for every covered pixel-center sample.
fn raster_into<T: Real>(
    mesh: &TriMesh<T>,
    camera: &Camera<T>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    emit: &mut dyn FnMut(usize, usize, T, u8),
) {
    if x0 >= x1 || y0 >= y1 {
        return;
    }
    let world_to_cam = camera.world_to_cam();
    let near = T::cst(NEAR_PLANE);
    let cam_verts: Vec<Vec3<T>> = mesh.vertices.iter().map(|&v| world_to_cam.apply(v)).collect();
    let labels = mesh.labels.as_deref();

    for face in &mesh.faces {
        let tri = [cam_verts[face[0]], cam_verts[face[1]], cam_verts[face[2]]];
        let lab = [
            labels.map_or(BACKGROUND_LABEL, |l| l[face[0]]),
            labels.map_or(BACKGROUND_LABEL, |l| l[face[1]]),
            labels.map_or(BACKGROUND_LABEL, |l| l[face[2]]),
        ];
        for (clipped, clab) in clip_near(&tri, &lab, near) {
            raster_triangle(&clipped, &clab, camera, x0, y0, x1, y1, emit);
        }
    }
}

/// Sutherland-Hodgman clip of one triangle against z = near, re-triangulated
/// as a fan. Labels follow the nearer original vertex at cut points.
fn clip_near<T: Real>(
    tri: &[Vec3<T>; 3],
    lab: &[u8; 3],
    near: T,
) -> Vec<([Vec3<T>; 3], [u8; 3])> {
    let inside = |v: &Vec3<T>| v.z >= near;
    let mut poly: Vec<(Vec3<T>, u8)> = Vec::with_capacity(4);
    for i in 0..3 {
        let (a, la) = (tri[i], lab[i]);
        let (b, lb) = (tri[(i + 1) % 3], lab[(i + 1) % 3]);
        let (ain, bin) = (inside(&a), inside(&b));
        if ain {
            poly.push((a, la));
        }
        if ain != bin {
            let t = (near - a.z) / (b.z - a.z);
            let p = a + (b - a) * t;
            let l = if t < T::cst(0.5) { la } else { lb };
            poly.push((p, l));
        }
    }
    let mut out = Vec::with_capacity(2);
    for i in 1..poly.len().saturating_sub(1) {
        out.push((
            [poly[0].0, poly[i].0, poly[i + 1].0],
            [poly[0].1, poly[i].1, poly[i + 1].1],
        ));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn raster_triangle<T: Real>(
    tri: &[Vec3<T>; 3],
    lab: &[u8; 3],
    camera: &Camera<T>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    emit: &mut dyn FnMut(usize, usize, T, u8),
) {
    // Screen-space vertices (pixel coordinates) for coverage testing.
    let mut pts = [(T::zero(), T::zero()); 3];
    for i in 0..3 {
        let (u, v, _) = camera.to_pixel(tri[i]);
        pts[i] = (u, v);
    }
    let area = edge(pts[0], pts[1], pts[2]);
    if area == T::zero() {
        return;
    }

    let fx0 = pts.iter().map(|p| p.0).fold(T::infinity(), T::min);
    let fx1 = pts.iter().map(|p| p.0).fold(T::neg_infinity(), T::max);
    let fy0 = pts.iter().map(|p| p.1).fold(T::infinity(), T::min);
    let fy1 = pts.iter().map(|p| p.1).fold(T::neg_infinity(), T::max);
    let px0 = (fx0.to_f64_lossy().floor().max(x0 as f64)) as usize;
    let px1 = (fx1.to_f64_lossy().ceil().min(x1 as f64)) as usize;
    let py0 = (fy0.to_f64_lossy().floor().max(y0 as f64)) as usize;
    let py1 = (fy1.to_f64_lossy().ceil().min(y1 as f64)) as usize;
    if px0 >= px1 || py0 >= py1 {
        return;
    }

    // Depth comes from intersecting the pixel ray with the triangle plane,
    // which is exact for fronto-parallel geometry. K has last row (0,0,1),
    // so the ray direction K^-1 (u,v,1) has unit z and t is the camera
    // depth itself.
    let k = &camera.intrinsics.m;
    let (fx, skew, cx) = (k[0][0], k[0][1], k[0][2]);
    let (fy, cy) = (k[1][1], k[1][2]);
    let normal = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
    let n_dot_a = normal.dot(tri[0]);
    let near = T::cst(NEAR_PLANE);

    let half = T::cst(0.5);
    for py in py0..py1 {
        let sy = T::cst(py as f64) + half;
        for px in px0..px1 {
            let sx = T::cst(px as f64) + half;
            let p = (sx, sy);
            let w0 = edge(pts[1], pts[2], p) / area;
            let w1 = edge(pts[2], pts[0], p) / area;
            let w2 = edge(pts[0], pts[1], p) / area;
            if w0 < T::zero() || w1 < T::zero() || w2 < T::zero() {
                continue;
            }
            let dy = (sy - cy) / fy;
            let dir = Vec3::new((sx - cx - skew * dy) / fx, dy, T::one());
            let denom = normal.dot(dir);
            if denom == T::zero() {
                continue;
            }
            let z = n_dot_a / denom;
            if !(z >= near && z <= camera.max_depth) {
                continue;
            }
            // Nearest vertex of the winning triangle labels the pixel.
            let pc = dir * z;
            let d0 = (tri[0] - pc).norm_sq();
            let d1 = (tri[1] - pc).norm_sq();
            let d2 = (tri[2] - pc).norm_sq();
            let label = if d0 <= d1 && d0 <= d2 {
                lab[0]
            } else if d1 <= d2 {
                lab[1]
            } else {
                lab[2]
            };
            emit(px, py, z, label);
        }
    }
}

fn edge<T: Real>(a: (T, T), b: (T, T), c: (T, T)) -> T {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec::RigidTransform;

    fn camera() -> Camera<f64> {
        Camera::new(
            Camera::default_intrinsics(),
            RigidTransform::identity(),
            480,
            270,
            10.0,
        )
        .unwrap()
    }

    fn fronto_square(depth: f64, half: f64) -> TriMesh<f64> {
        TriMesh::new(
            vec![
                Vec3::new(-half, -half, depth),
                Vec3::new(half, -half, depth),
                Vec3::new(half, half, depth),
                Vec3::new(-half, half, depth),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            Some(vec![5, 5, 5, 5]),
        )
        .unwrap()
    }

    #[test]
    fn fronto_parallel_plane_depth_is_exact() {
        let cam = camera();
        let view = rasterize(&fronto_square(3.0, 2.0), &cam);
        let d = view.depth_at(240, 135);
        assert_eq!(d, 3.0);
        assert_eq!(view.label_at(240, 135), 5);
        // A pixel far outside the square projection misses.
        assert_eq!(view.depth_at(0, 0), 0.0);
        assert_eq!(view.label_at(0, 0), BACKGROUND_LABEL);
    }

    #[test]
    fn nearer_triangle_wins_every_contested_pixel() {
        let cam = camera();
        let mut mesh = fronto_square(4.0, 2.0);
        mesh.labels = Some(vec![1, 1, 1, 1]);
        let near = fronto_square(2.0, 1.0);
        let mut both = mesh.clone();
        both.append(&near);
        let view = rasterize(&both, &cam);
        let near_view = rasterize(&near, &cam);
        for y in 0..270 {
            for x in 0..480 {
                if near_view.depth_at(x, y) > 0.0 {
                    assert_eq!(view.depth_at(x, y), 2.0, "pixel {x},{y}");
                    assert_eq!(view.label_at(x, y), 5);
                }
            }
        }
    }

    #[test]
    fn sphere_center_depth_matches_analytic_front_distance() {
        // Ray through the image center hits the sphere front at
        // center_z - radius.
        let cam = camera();
        let center = Vec3::new(0.0, 0.0, 5.0);
        let radius = 1.0;
        let mesh = uv_sphere(center, radius, 48, 64);
        let view = rasterize(&mesh, &cam);
        // cx=239.5, cy=134.5: the exact axis passes between pixels; sample
        // the pixel whose center is nearest the principal point.
        let d = view.depth_at(239, 134);
        assert!((d - 4.0).abs() < 0.01, "depth {d}");
    }

    #[test]
    fn geometry_behind_camera_is_clipped_not_wrapped() {
        let cam = camera();
        let mesh = fronto_square(-3.0, 2.0);
        let view = rasterize(&mesh, &cam);
        assert!(view.depth.iter().all(|&d| d == 0.0));
    }

    fn uv_sphere(center: Vec3<f64>, r: f64, rings: usize, segs: usize) -> TriMesh<f64> {
        let mut verts = vec![center + Vec3::new(0.0, r, 0.0)];
        for i in 1..rings {
            let phi = std::f64::consts::PI * i as f64 / rings as f64;
            for j in 0..segs {
                let theta = 2.0 * std::f64::consts::PI * j as f64 / segs as f64;
                verts.push(
                    center
                        + Vec3::new(
                            r * phi.sin() * theta.cos(),
                            r * phi.cos(),
                            r * phi.sin() * theta.sin(),
                        ),
                );
            }
        }
        verts.push(center + Vec3::new(0.0, -r, 0.0));
        let bottom = verts.len() - 1;
        let mut faces = Vec::new();
        for j in 0..segs {
            faces.push([0, 1 + j, 1 + (j + 1) % segs]);
        }
        for i in 0..rings - 2 {
            let a = 1 + i * segs;
            let b = 1 + (i + 1) * segs;
            for j in 0..segs {
                let j1 = (j + 1) % segs;
                faces.push([a + j, b + j, b + j1]);
                faces.push([a + j, b + j1, a + j1]);
            }
        }
        let last = 1 + (rings - 2) * segs;
        for j in 0..segs {
            faces.push([bottom, last + (j + 1) % segs, last + j]);
        }
        TriMesh::new(verts, faces, None).unwrap()
    }
}
