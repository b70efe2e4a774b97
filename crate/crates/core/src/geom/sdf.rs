use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::diff::{CustomOp, DiffError, Tensor};
use crate::scalar::Real;

use super::mesh::TriMesh;
use super::vec::Vec3;
use super::GeomError;

pub const SDF_MAGIC: [u8; 4] = *b"PSDF";
pub const SDF_VERSION: u16 = 1;

/// Uniform voxel grid of signed distances spanning a padded bounding box of
/// its source mesh. Values are x-fastest, then y, then z.
///
/// Sign convention for enclosed scenes: a point whose axis rays cross the
/// mesh an odd number of times lies inside the outermost shell — navigable
/// room air — and is positive; even parity (inside solid furniture, or
/// outside the room entirely) is negative.
#[derive(Debug, Clone)]
pub struct SdfGrid<T> {
    pub origin: Vec3<T>,
    pub spacing: T,
    pub dims: [usize; 3],
    pub values: Vec<T>,
}

impl<T: Real> SdfGrid<T> {
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> Vec3<T> {
        self.origin
            + Vec3::new(
                T::cst(ix as f64) * self.spacing,
                T::cst(iy as f64) * self.spacing,
                T::cst(iz as f64) * self.spacing,
            )
    }

    pub fn node_value(&self, ix: usize, iy: usize, iz: usize) -> T {
        self.values[self.node_index(ix, iy, iz)]
    }

    /// Trilinear interpolation at a world point. Returns the value, its
    /// spatial gradient, and whether the point was clamped to the grid.
    /// Along a clamped axis the sampled function is constant, so that
    /// gradient component is zero.
    pub fn sample(&self, p: Vec3<T>) -> (T, Vec3<T>, bool) {
        let one = T::one();
        let mut clamped = false;
        let mut clamped_axis = [false; 3];
        let mut cell = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for ax in 0..3 {
            let c = (p.axis(ax) - self.origin.axis(ax)) / self.spacing;
            // Queries at reconstructed node positions land within a few ulp
            // of an integer; snap so they reproduce stored values exactly.
            let rounded = c.round();
            let c = if (c - rounded).abs() < T::cst(1e-9) { rounded } else { c };
            let max_c = T::cst((self.dims[ax] - 1) as f64);
            let cc = if c < T::zero() {
                clamped = true;
                clamped_axis[ax] = true;
                T::zero()
            } else if c > max_c {
                clamped = true;
                clamped_axis[ax] = true;
                max_c
            } else {
                c
            };
            let mut i = cc.to_f64_lossy().floor() as usize;
            if i >= self.dims[ax] - 1 {
                i = self.dims[ax] - 2;
            }
            cell[ax] = i;
            frac[ax] = cc - T::cst(i as f64);
        }
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let v = |dx: usize, dy: usize, dz: usize| {
            self.node_value(cell[0] + dx, cell[1] + dy, cell[2] + dz)
        };
        let (v000, v100) = (v(0, 0, 0), v(1, 0, 0));
        let (v010, v110) = (v(0, 1, 0), v(1, 1, 0));
        let (v001, v101) = (v(0, 0, 1), v(1, 0, 1));
        let (v011, v111) = (v(0, 1, 1), v(1, 1, 1));

        let c00 = v000 * (one - fx) + v100 * fx;
        let c10 = v010 * (one - fx) + v110 * fx;
        let c01 = v001 * (one - fx) + v101 * fx;
        let c11 = v011 * (one - fx) + v111 * fx;
        let c0 = c00 * (one - fy) + c10 * fy;
        let c1 = c01 * (one - fy) + c11 * fy;
        let value = c0 * (one - fz) + c1 * fz;

        // Analytic derivative of the trilinear polynomial, chain-ruled by
        // 1/spacing.
        let d_dx = ((v100 - v000) * (one - fy) + (v110 - v010) * fy) * (one - fz)
            + ((v101 - v001) * (one - fy) + (v111 - v011) * fy) * fz;
        let d_dy = (c10 - c00) * (one - fz) + (c11 - c01) * fz;
        let d_dz = c1 - c0;
        let mut grad = Vec3::new(d_dx, d_dy, d_dz) / self.spacing;
        if clamped_axis[0] {
            grad.x = T::zero();
        }
        if clamped_axis[1] {
            grad.y = T::zero();
        }
        if clamped_axis[2] {
            grad.z = T::zero();
        }
        (value, grad, clamped)
    }
}

/// Signed distance grid from a triangle mesh: unsigned nearest-triangle
/// distance at every node with the ray-parity sign (majority over +X, +Y, +Z
/// rays; grazing rays are re-cast with a deterministic jitter).
pub fn compute_sdf<T: Real>(
    mesh: &TriMesh<T>,
    dims: [usize; 3],
    padding: T,
) -> Result<SdfGrid<T>, GeomError> {
    if mesh.is_empty() {
        return Err(GeomError::EmptyMesh);
    }
    assert!(dims.iter().all(|&d| d >= 2), "grid needs at least 2 nodes per axis");
    let (lo, hi) = mesh.bbox();
    let lo = lo - Vec3::splat(padding);
    let hi = hi + Vec3::splat(padding);
    // Isotropic spacing: take the largest per-axis requirement, then center
    // the (possibly larger) coverage on the padded box.
    let mut spacing = T::zero();
    for ax in 0..3 {
        let s = (hi.axis(ax) - lo.axis(ax)) / T::cst((dims[ax] - 1) as f64);
        spacing = spacing.max(s);
    }
    let center = (lo + hi) * T::cst(0.5);
    let origin = Vec3::new(
        center.x - spacing * T::cst((dims[0] - 1) as f64 / 2.0),
        center.y - spacing * T::cst((dims[1] - 1) as f64 / 2.0),
        center.z - spacing * T::cst((dims[2] - 1) as f64 / 2.0),
    );

    let tris: Vec<[Vec3<T>; 3]> = mesh
        .faces
        .iter()
        .map(|f| [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]])
        .collect();
    let bvh = Bvh::build(&tris);

    let n_nodes = dims[0] * dims[1] * dims[2];
    // Nodes this close to a surface are stored unsigned: every axis ray
    // grazes the surface the node sits on, and the sign of a ~zero value is
    // immaterial.
    let surface_eps = T::cst(1e-7);
    let results: Vec<(T, bool)> = (0..n_nodes)
        .into_par_iter()
        .map(|idx| {
            let ix = idx % dims[0];
            let iy = (idx / dims[0]) % dims[1];
            let iz = idx / (dims[0] * dims[1]);
            let p = origin
                + Vec3::new(
                    T::cst(ix as f64) * spacing,
                    T::cst(iy as f64) * spacing,
                    T::cst(iz as f64) * spacing,
                );
            let dist = bvh.distance(p);
            if dist < surface_eps {
                return (dist, false);
            }
            match parity_sign(&bvh, p) {
                Some(inside_shell) => {
                    let sign = if inside_shell { T::one() } else { -T::one() };
                    (sign * dist, false)
                }
                None => (dist, true),
            }
        })
        .collect();

    let inconsistent = results.iter().filter(|(_, bad)| *bad).count();
    if inconsistent * 1000 > n_nodes {
        return Err(GeomError::OpenMesh { inconsistent, total: n_nodes });
    }
    let values = results.into_iter().map(|(v, _)| v).collect();
    Ok(SdfGrid { origin, spacing, dims, values })
}

/// Majority inside/outside vote over axis rays; `None` when fewer than two
/// rays produce a clean crossing count.
fn parity_sign<T: Real>(bvh: &Bvh<T>, p: Vec3<T>) -> Option<bool> {
    let axes = [
        Vec3::new(T::one(), T::zero(), T::zero()),
        Vec3::new(T::zero(), T::one(), T::zero()),
        Vec3::new(T::zero(), T::zero(), T::one()),
    ];
    let mut votes = [None; 3];
    for (k, axis) in axes.iter().enumerate() {
        for attempt in 0..5u32 {
            // Deterministic jitter directions for re-cast after a graze.
            let dir = if attempt == 0 {
                *axis
            } else {
                let a = T::cst(0.011 * attempt as f64);
                let b = T::cst(0.017 * attempt as f64);
                (*axis + axes[(k + 1) % 3] * a + axes[(k + 2) % 3] * b).normalized()
            };
            if let Some(crossings) = bvh.count_crossings(p, dir) {
                votes[k] = Some(crossings % 2 == 1);
                break;
            }
        }
    }
    let inside = votes.iter().flatten().filter(|&&v| v).count();
    let outside = votes.iter().flatten().filter(|&&v| !v).count();
    if inside >= 2 {
        Some(true)
    } else if outside >= 2 {
        Some(false)
    } else {
        None
    }
}

// ---- file format ----

pub fn write_sdf<T: Real>(path: &Path, grid: &SdfGrid<T>) -> Result<(), GeomError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&SDF_MAGIC)?;
    w.write_all(&SDF_VERSION.to_le_bytes())?;
    for d in grid.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in [grid.origin.x, grid.origin.y, grid.origin.z] {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    w.write_all(&(grid.spacing.to_f64_lossy() as f32).to_le_bytes())?;
    for v in &grid.values {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sdf<T: Real>(path: &Path) -> Result<SdfGrid<T>, GeomError> {
    const F: &str = "PSDF sdf grid";
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 4 + 2 + 12 + 12 + 4 {
        return Err(GeomError::format(F, "file too short"));
    }
    if buf[0..4] != SDF_MAGIC {
        return Err(GeomError::format(F, format!("bad magic {:?}, expected \"PSDF\"", &buf[0..4])));
    }
    let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    if version != SDF_VERSION {
        return Err(GeomError::format(F, format!("unsupported version {version}")));
    }
    let mut pos = 6usize;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
    }
    let mut of = [0f32; 4];
    for v in &mut of {
        *v = f32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap());
        pos += 4;
    }
    let n = dims[0] * dims[1] * dims[2];
    if buf.len() != pos + 4 * n {
        return Err(GeomError::format(
            F,
            format!("expected {} value bytes, found {}", 4 * n, buf.len() - pos),
        ));
    }
    let values = buf[pos..]
        .chunks_exact(4)
        .map(|c| T::cst(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(SdfGrid {
        origin: Vec3::new(T::cst(of[0] as f64), T::cst(of[1] as f64), T::cst(of[2] as f64)),
        spacing: T::cst(of[3] as f64),
        dims,
        values,
    })
}

// ---- autodiff bridge ----

/// Graph op sampling the SDF at a batch of points (N,3) -> (N,), with the
/// trilinear spatial derivative as the gradient w.r.t. the points.
pub struct SdfSampleOp<T> {
    pub grid: Arc<SdfGrid<T>>,
}

impl<T: Real> CustomOp<T> for SdfSampleOp<T> {
    fn name(&self) -> &'static str {
        "sample_sdf"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>), DiffError> {
        let pts = inputs[0];
        if pts.shape().len() != 2 || pts.shape()[1] != 3 {
            return Err(DiffError::shape("sample_sdf", format!("points must be (N,3), got {:?}", pts.shape())));
        }
        let n = pts.shape()[0];
        let v = pts.values();
        let mut out = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n * 3);
        for i in 0..n {
            let p = Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
            let (val, grad, _clamped) = self.grid.sample(p);
            out.push(val);
            grads.extend_from_slice(&[grad.x, grad.y, grad.z]);
        }
        Ok((Tensor::new(&[n], out)?, vec![Tensor::new(&[n, 3], grads)?]))
    }

    fn backward(
        &self,
        saved: &[Tensor<T>],
        _inputs: &[&Tensor<T>],
        grad_out: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let spatial = &saved[0];
        let n = grad_out.numel();
        let mut g = vec![T::zero(); n * 3];
        for i in 0..n {
            let go = grad_out.values()[i];
            for ax in 0..3 {
                g[3 * i + ax] = go * spatial.values()[3 * i + ax];
            }
        }
        vec![Some(Tensor::new(&[n, 3], g).expect("grad shape"))]
    }
}

// ---- BVH ----

struct BvhNode<T> {
    lo: Vec3<T>,
    hi: Vec3<T>,
    /// Leaf: (start, count) into `tri_order`; internal: children at
    /// (self+1, right).
    right: usize,
    start: usize,
    count: usize,
}

pub(crate) struct Bvh<T> {
    nodes: Vec<BvhNode<T>>,
    tris: Vec<[Vec3<T>; 3]>,
}

const LEAF_SIZE: usize = 8;

impl<T: Real> Bvh<T> {
    pub(crate) fn build(tris: &[[Vec3<T>; 3]]) -> Self {
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 4);
        Self::build_node(tris, &mut order, 0, tris.len(), &mut nodes);
        let tris = order.iter().map(|&i| tris[i]).collect();
        Bvh { nodes, tris }
    }

    fn build_node(
        tris: &[[Vec3<T>; 3]],
        order: &mut [usize],
        start: usize,
        count: usize,
        nodes: &mut Vec<BvhNode<T>>,
    ) -> usize {
        let mut lo = Vec3::splat(T::infinity());
        let mut hi = Vec3::splat(T::neg_infinity());
        for &ti in &order[start..start + count] {
            for v in &tris[ti] {
                lo = lo.min_by_component(*v);
                hi = hi.max_by_component(*v);
            }
        }
        let me = nodes.len();
        nodes.push(BvhNode { lo, hi, right: 0, start, count });
        if count <= LEAF_SIZE {
            return me;
        }
        // Median split along the longest extent of triangle centroids.
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let centroid = |ti: usize| {
            let t = &tris[ti];
            (t[0].axis(axis) + t[1].axis(axis) + t[2].axis(axis)) / T::cst(3.0)
        };
        order[start..start + count].sort_by(|&a, &b| {
            centroid(a).partial_cmp(&centroid(b)).unwrap_or(std::cmp::Ordering::Equal)
        });
        let half = count / 2;
        let _left = Self::build_node(tris, order, start, half, nodes);
        let right = Self::build_node(tris, order, start + half, count - half, nodes);
        nodes[me].right = right;
        nodes[me].count = 0; // marks internal
        me
    }

    fn aabb_dist_sq(lo: Vec3<T>, hi: Vec3<T>, p: Vec3<T>) -> T {
        let mut d = T::zero();
        for ax in 0..3 {
            let v = p.axis(ax);
            let c = v.max(lo.axis(ax)).min(hi.axis(ax));
            d += (v - c) * (v - c);
        }
        d
    }

    /// Unsigned distance to the nearest triangle.
    pub(crate) fn distance(&self, p: Vec3<T>) -> T {
        let mut best = T::infinity();
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if Self::aabb_dist_sq(node.lo, node.hi, p) >= best {
                continue;
            }
            if node.count > 0 {
                for t in &self.tris[node.start..node.start + node.count] {
                    let d = point_triangle_dist_sq(p, t);
                    best = best.min(d);
                }
            } else {
                stack.push(ni + 1);
                stack.push(node.right);
            }
        }
        best.sqrt()
    }

    /// Count ray crossings; `None` when the ray grazes an edge, vertex, or a
    /// near-parallel triangle and the count is unreliable.
    pub(crate) fn count_crossings(&self, p: Vec3<T>, dir: Vec3<T>) -> Option<usize> {
        let mut count = 0usize;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if !ray_hits_aabb(p, dir, node.lo, node.hi) {
                continue;
            }
            if node.count > 0 {
                for t in &self.tris[node.start..node.start + node.count] {
                    match ray_triangle(p, dir, t) {
                        RayHit::Cross => count += 1,
                        RayHit::Miss => {}
                        RayHit::Degenerate => return None,
                    }
                }
            } else {
                stack.push(ni + 1);
                stack.push(node.right);
            }
        }
        Some(count)
    }
}

fn ray_hits_aabb<T: Real>(p: Vec3<T>, dir: Vec3<T>, lo: Vec3<T>, hi: Vec3<T>) -> bool {
    let mut tmin = T::zero();
    let mut tmax = T::infinity();
    for ax in 0..3 {
        let d = dir.axis(ax);
        let o = p.axis(ax);
        if d.abs() < T::cst(1e-12) {
            if o < lo.axis(ax) || o > hi.axis(ax) {
                return false;
            }
        } else {
            let inv = T::one() / d;
            let (t0, t1) = ((lo.axis(ax) - o) * inv, (hi.axis(ax) - o) * inv);
            let (t0, t1) = (t0.min(t1), t0.max(t1));
            tmin = tmin.max(t0);
            tmax = tmax.min(t1);
            if tmin > tmax {
                return false;
            }
        }
    }
    true
}

enum RayHit {
    Cross,
    Miss,
    Degenerate,
}

/// Moller-Trumbore with conservative graze detection: hits with barycentrics
/// or t too close to a boundary are reported as degenerate so the caller can
/// re-cast.
fn ray_triangle<T: Real>(orig: Vec3<T>, dir: Vec3<T>, tri: &[Vec3<T>; 3]) -> RayHit {
    let eps = T::cst(1e-10);
    let edge_eps = T::cst(1e-9);
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let h = dir.cross(e2);
    let det = e1.dot(h);
    // Scale-aware parallel test.
    let scale = e1.norm() * e2.norm();
    if det.abs() <= eps * scale {
        // Parallel ray: either misses entirely or grazes in-plane.
        let n = e1.cross(e2);
        let dist_plane = (orig - tri[0]).dot(n).abs();
        if dist_plane > eps * scale {
            return RayHit::Miss;
        }
        return RayHit::Degenerate;
    }
    let inv = T::one() / det;
    let s = orig - tri[0];
    let u = s.dot(h) * inv;
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    let t = e2.dot(q) * inv;
    let w = T::one() - u - v;
    if u < -edge_eps || v < -edge_eps || w < -edge_eps || t < -edge_eps {
        return RayHit::Miss;
    }
    if u < edge_eps || v < edge_eps || w < edge_eps || t < edge_eps {
        return RayHit::Degenerate;
    }
    RayHit::Cross
}

/// Squared distance from a point to a triangle (Ericson's region method).
pub(crate) fn point_triangle_dist_sq<T: Real>(p: Vec3<T>, tri: &[Vec3<T>; 3]) -> T {
    let (a, b, c) = (tri[0], tri[1], tri[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= T::zero() && d2 <= T::zero() {
        return (p - a).norm_sq();
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= T::zero() && d4 <= d3 {
        return (p - b).norm_sq();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= T::zero() && d1 >= T::zero() && d3 <= T::zero() {
        let t = d1 / (d1 - d3);
        return (p - (a + ab * t)).norm_sq();
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= T::zero() && d5 <= d6 {
        return (p - c).norm_sq();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= T::zero() && d2 >= T::zero() && d6 <= T::zero() {
        let t = d2 / (d2 - d6);
        return (p - (a + ac * t)).norm_sq();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= T::zero() && (d4 - d3) >= T::zero() && (d5 - d6) >= T::zero() {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * t)).norm_sq();
    }
    let denom = T::one() / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm_sq()
}
