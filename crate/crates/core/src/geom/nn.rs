use std::sync::Arc;

use crate::diff::{CustomOp, DiffError, Tensor};
use crate::scalar::Real;

use super::vec::Vec3;

/// Uniform hash grid over a fixed point set for exact nearest-neighbor
/// queries (expanding shell search with a distance bound, so results match
/// exhaustive search).
#[derive(Debug)]
pub struct PointGrid<T> {
    points: Vec<Vec3<T>>,
    origin: Vec3<T>,
    cell: T,
    dims: [usize; 3],
    /// CSR-style buckets: `starts[c]..starts[c+1]` indexes into `order`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<T: Real> PointGrid<T> {
    pub fn build(points: Vec<Vec3<T>>, cell: T) -> Self {
        assert!(!points.is_empty(), "PointGrid needs at least one point");
        assert!(cell > T::zero());
        let mut lo = Vec3::splat(T::infinity());
        let mut hi = Vec3::splat(T::neg_infinity());
        for &p in &points {
            lo = lo.min_by_component(p);
            hi = hi.max_by_component(p);
        }
        let mut dims = [1usize; 3];
        for ax in 0..3 {
            let span = (hi.axis(ax) - lo.axis(ax)) / cell;
            dims[ax] = (span.to_f64_lossy().floor() as usize + 1).max(1);
        }
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: Vec3<T>| -> usize {
            let mut c = [0usize; 3];
            for ax in 0..3 {
                let i = ((p.axis(ax) - lo.axis(ax)) / cell).to_f64_lossy().floor() as usize;
                c[ax] = i.min(dims[ax] - 1);
            }
            c[0] + dims[0] * (c[1] + dims[1] * c[2])
        };
        let mut counts = vec![0usize; n_cells + 1];
        for &p in &points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0usize; points.len()];
        for (i, &p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        PointGrid { points, origin: lo, cell, dims, starts, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3<T> {
        self.points[i]
    }

    /// Index and distance of the exact nearest point.
    pub fn nearest(&self, p: Vec3<T>) -> (usize, T) {
        let mut home = [0isize; 3];
        for ax in 0..3 {
            home[ax] = ((p.axis(ax) - self.origin.axis(ax)) / self.cell).to_f64_lossy().floor() as isize;
        }
        let mut best = T::infinity();
        let mut best_i = 0usize;
        let max_r = self.dims.iter().max().copied().unwrap_or(1) as isize + 1;
        for r in 0..=max_r {
            // After scanning shells 0..r-1, any unscanned point sits in a
            // cell at Chebyshev radius >= r and is at least (r-1)*cell away.
            if r > 0 && best <= T::cst((r - 1) as f64) * self.cell {
                break;
            }
            self.scan_shell(home, r, p, &mut best, &mut best_i);
        }
        (best_i, best)
    }

    fn scan_shell(&self, home: [isize; 3], r: isize, p: Vec3<T>, best: &mut T, best_i: &mut usize) {
        let lo = [home[0] - r, home[1] - r, home[2] - r];
        let hi = [home[0] + r, home[1] + r, home[2] + r];
        for z in lo[2]..=hi[2] {
            if z < 0 || z >= self.dims[2] as isize {
                continue;
            }
            for y in lo[1]..=hi[1] {
                if y < 0 || y >= self.dims[1] as isize {
                    continue;
                }
                for x in lo[0]..=hi[0] {
                    if x < 0 || x >= self.dims[0] as isize {
                        continue;
                    }
                    // Only the shell surface; the interior was already seen.
                    let on_shell = (x - home[0]).abs() == r
                        || (y - home[1]).abs() == r
                        || (z - home[2]).abs() == r;
                    if !on_shell {
                        continue;
                    }
                    let c = x as usize + self.dims[0] * (y as usize + self.dims[1] * z as usize);
                    for &pi in &self.order[self.starts[c]..self.starts[c + 1]] {
                        let d = (self.points[pi] - p).norm();
                        if d < *best {
                            *best = d;
                            *best_i = pi;
                        }
                    }
                }
            }
        }
    }
}

/// Graph op: per-row distance from query points (N,3) to their nearest
/// neighbor in a fixed point set. The association is frozen per evaluation;
/// gradients flow through the query side only, along the unit direction to
/// the matched point.
pub struct NearestDistOp<T> {
    pub targets: Arc<PointGrid<T>>,
}

impl<T: Real> CustomOp<T> for NearestDistOp<T> {
    fn name(&self) -> &'static str {
        "nearest_dist"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>), DiffError> {
        let pts = inputs[0];
        if pts.shape().len() != 2 || pts.shape()[1] != 3 {
            return Err(DiffError::shape(
                "nearest_dist",
                format!("points must be (N,3), got {:?}", pts.shape()),
            ));
        }
        let n = pts.shape()[0];
        let v = pts.values();
        let mut dists = Vec::with_capacity(n);
        let mut dirs = Vec::with_capacity(n * 3);
        let tiny = T::cst(1e-12);
        for i in 0..n {
            let p = Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
            let (qi, d) = self.targets.nearest(p);
            dists.push(d);
            if d > tiny {
                let dir = (p - self.targets.point(qi)) / d;
                dirs.extend_from_slice(&[dir.x, dir.y, dir.z]);
            } else {
                dirs.extend_from_slice(&[T::zero(); 3]);
            }
        }
        Ok((Tensor::new(&[n], dists)?, vec![Tensor::new(&[n, 3], dirs)?]))
    }

    fn backward(
        &self,
        saved: &[Tensor<T>],
        _inputs: &[&Tensor<T>],
        grad_out: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let dirs = &saved[0];
        let n = grad_out.numel();
        let mut g = vec![T::zero(); n * 3];
        for i in 0..n {
            let go = grad_out.values()[i];
            for ax in 0..3 {
                g[3 * i + ax] = go * dirs.values()[3 * i + ax];
            }
        }
        vec![Some(Tensor::new(&[n, 3], g).expect("grad shape"))]
    }
}
