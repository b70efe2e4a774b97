use crate::scalar::Real;

use super::vec::{RigidTransform, Vec3};
use super::GeomError;

/// Triangle mesh with optional per-vertex semantic labels
/// (Matterport-40 category ids, 0..=39).
#[derive(Debug, Clone)]
pub struct TriMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub faces: Vec<[usize; 3]>,
    pub labels: Option<Vec<u8>>,
}

impl<T: Real> TriMesh<T> {
    pub fn new(
        vertices: Vec<Vec3<T>>,
        faces: Vec<[usize; 3]>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self, GeomError> {
        let mesh = TriMesh { vertices, faces, labels };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(GeomError::InvalidMesh(format!("face {i} references vertex beyond {n}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeomError::InvalidMesh(format!("face {i} is degenerate: {:?}", f)));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(GeomError::InvalidMesh(format!(
                    "{} labels for {} vertices",
                    l.len(),
                    n
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn bbox(&self) -> (Vec3<T>, Vec3<T>) {
        let mut lo = Vec3::splat(T::infinity());
        let mut hi = Vec3::splat(T::neg_infinity());
        for &v in &self.vertices {
            lo = lo.min_by_component(v);
            hi = hi.max_by_component(v);
        }
        (lo, hi)
    }

    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| t.apply(v)).collect(),
            faces: self.faces.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn triangle(&self, f: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Append another mesh (labels merge; missing labels become 255).
    pub fn append(&mut self, other: &TriMesh<T>) {
        let base = self.vertices.len();
        if self.labels.is_some() || other.labels.is_some() {
            let mut l = self
                .labels
                .take()
                .unwrap_or_else(|| vec![255; self.vertices.len()]);
            match &other.labels {
                Some(ol) => l.extend_from_slice(ol),
                None => l.extend(std::iter::repeat_n(255u8, other.vertices.len())),
            }
            self.labels = Some(l);
        }
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }

    /// 4-way subdivision until every edge is at most `max_edge` long.
    /// Midpoint vertices are appended without welding; the midpoint label is
    /// taken from the first endpoint. Used to densify coarse box scenes
    /// before vertex-based contact queries.
    pub fn refined(&self, max_edge: T) -> Self {
        let mut vertices = self.vertices.clone();
        let mut labels = self.labels.clone();
        let mut out_faces = Vec::with_capacity(self.faces.len() * 4);
        let max_sq = max_edge * max_edge;
        let mut stack: Vec<[usize; 3]> = self.faces.clone();
        while let Some(f) = stack.pop() {
            let [a, b, c] = f;
            let (va, vb, vc) = (vertices[a], vertices[b], vertices[c]);
            let longest = (va - vb)
                .norm_sq()
                .max((vb - vc).norm_sq())
                .max((vc - va).norm_sq());
            if longest <= max_sq {
                out_faces.push(f);
                continue;
            }
            let mut mid = |i: usize, j: usize| -> usize {
                let m = (vertices[i] + vertices[j]) * T::cst(0.5);
                vertices.push(m);
                if let Some(l) = labels.as_mut() {
                    let li = l[i];
                    l.push(li);
                }
                vertices.len() - 1
            };
            let ab = mid(a, b);
            let bc = mid(b, c);
            let ca = mid(c, a);
            stack.push([a, ab, ca]);
            stack.push([ab, b, bc]);
            stack.push([ca, bc, c]);
            stack.push([ab, bc, ca]);
        }
        TriMesh { vertices, faces: out_faces, labels }
    }
}
