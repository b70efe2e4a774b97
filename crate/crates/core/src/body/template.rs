use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::Tensor;
use crate::geom::{TriMesh, Vec3};
use crate::scalar::Real;

use super::part::PartLabel;
use super::BodyError;

pub const TEMPLATE_MAGIC: [u8; 4] = *b"PSBT";
pub const TEMPLATE_VERSION: u16 = 1;

/// Joints in the kinematic tree: 22 body joints plus 2 hand roots.
pub const JOINT_COUNT: usize = 24;
/// Joints driven by the pose latent (everything but the hand roots).
pub const POSE_JOINTS: usize = 22;

/// Contact set used when none is configured: the parts PROX-style contact
/// terms care about.
pub const DEFAULT_CONTACT_PARTS: [PartLabel; 8] = [
    PartLabel::Gluteus,
    PartLabel::ThighL,
    PartLabel::ThighR,
    PartLabel::FootL,
    PartLabel::FootR,
    PartLabel::HandL,
    PartLabel::HandR,
    PartLabel::TorsoBack,
];

/// Procedurally built capsule-limb body template: rest mesh, kinematic
/// tree, skinning weights, shape blendshapes, the bounded pose decoder, and
/// per-joint angle limits.
#[derive(Debug, Clone)]
pub struct BodyTemplate<T> {
    pub seed: u64,
    pub rest_vertices: Vec<Vec3<T>>,
    pub faces: Vec<[usize; 3]>,
    pub part_labels: Vec<PartLabel>,
    /// Parent joint per joint; the pelvis (joint 0) is the root.
    pub parents: Vec<Option<usize>>,
    /// Rest joint positions, consistent with the regressor by construction.
    pub rest_joints: Vec<Vec3<T>>,
    /// (JOINT_COUNT, V): shaped joints = regressor x shaped vertices.
    pub joint_regressor: Tensor<T>,
    /// (V, JOINT_COUNT) row-stochastic skinning weights.
    pub skin_weights: Tensor<T>,
    /// (10, 3V) per-vertex offset fields.
    pub blendshapes: Tensor<T>,
    /// Per-joint per-component rotation limit (radians).
    pub joint_limits: Vec<T>,
    /// (3*POSE_JOINTS, 32) bounded-linear pose decoder matrix.
    pub pose_decoder: Tensor<T>,
    pub decoder_gain: T,
    /// Linear map from the 12 per-hand coefficients to a curl angle.
    pub hand_curl_weights: Vec<T>,
}

impl<T: Real> BodyTemplate<T> {
    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn rest_mesh(&self) -> TriMesh<T> {
        TriMesh {
            vertices: self.rest_vertices.clone(),
            faces: self.faces.clone(),
            labels: None,
        }
    }

    /// Rest vertices flattened row-major (1, 3V), the base of the shape
    /// blend.
    pub fn rest_flat(&self) -> Tensor<T> {
        let mut v = Vec::with_capacity(3 * self.rest_vertices.len());
        for p in &self.rest_vertices {
            v.extend_from_slice(&[p.x, p.y, p.z]);
        }
        Tensor::new(&[1, v.len()], v).expect("rest shape")
    }

    pub fn part_counts(&self) -> [usize; 16] {
        let mut counts = [0usize; 16];
        for &l in &self.part_labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        let v = self.rest_vertices.len();
        if self.part_labels.len() != v {
            return Err(BodyError::BadLength { what: "part labels", expected: v, got: self.part_labels.len() });
        }
        if self.parents.len() != JOINT_COUNT || self.rest_joints.len() != JOINT_COUNT {
            return Err(BodyError::BadLength {
                what: "joints",
                expected: JOINT_COUNT,
                got: self.parents.len().min(self.rest_joints.len()),
            });
        }
        if self.parents[0].is_some() {
            return Err(BodyError::format("PSBT body template", "joint 0 must be the root"));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(pi) if *pi < j => {}
                _ => {
                    return Err(BodyError::format(
                        "PSBT body template",
                        format!("joint {j} must have a parent earlier in the array"),
                    ));
                }
            }
        }
        let w = self.skin_weights.values();
        let tol = T::cst(1e-9);
        for row in 0..v {
            let sum: T = w[row * JOINT_COUNT..(row + 1) * JOINT_COUNT].iter().copied().sum();
            if (sum - T::one()).abs() > tol {
                return Err(BodyError::format(
                    "PSBT body template",
                    format!("skin weight row {row} sums to {}", sum.to_f64_lossy()),
                ));
            }
        }
        Ok(())
    }
}

/// Vertex indices whose part label is in `parts`.
pub fn contact_vertices<T: Real>(template: &BodyTemplate<T>, parts: &[PartLabel]) -> Vec<usize> {
    template
        .part_labels
        .iter()
        .enumerate()
        .filter(|(_, l)| parts.contains(l))
        .map(|(i, _)| i)
        .collect()
}

// ---- procedural construction ----

struct JointSpec {
    parent: Option<usize>,
    pos: [f64; 3],
    limit: f64,
}

/// Designed joint layout (y-up, meters, rest pose standing with arms down,
/// feet soles at y = 0). Order matters: parents precede children.
fn joint_table() -> Vec<JointSpec> {
    let j = |parent: Option<usize>, pos: [f64; 3], limit: f64| JointSpec { parent, pos, limit };
    vec![
        j(None, [0.0, 0.95, 0.0], 0.30),        // 0 pelvis
        j(Some(0), [0.0, 1.05, 0.0], 0.35),     // 1 spine1
        j(Some(1), [0.0, 1.175, 0.0], 0.35),    // 2 spine2
        j(Some(2), [0.0, 1.30, 0.0], 0.35),     // 3 chest
        j(Some(3), [0.0, 1.45, 0.0], 0.50),     // 4 neck
        j(Some(4), [0.0, 1.55, 0.0], 0.50),     // 5 head
        j(Some(0), [0.09, 0.90, 0.0], 1.90),    // 6 hip L
        j(Some(0), [-0.09, 0.90, 0.0], 1.90),   // 7 hip R
        j(Some(6), [0.10, 0.50, 0.0], 2.20),    // 8 knee L
        j(Some(7), [-0.10, 0.50, 0.0], 2.20),   // 9 knee R
        j(Some(8), [0.10, 0.08, 0.0], 0.70),    // 10 ankle L
        j(Some(9), [-0.10, 0.08, 0.0], 0.70),   // 11 ankle R
        j(Some(10), [0.10, 0.02, 0.12], 0.40),  // 12 toe L
        j(Some(11), [-0.10, 0.02, 0.12], 0.40), // 13 toe R
        j(Some(3), [0.06, 1.40, 0.0], 0.30),    // 14 clavicle L
        j(Some(3), [-0.06, 1.40, 0.0], 0.30),   // 15 clavicle R
        j(Some(14), [0.18, 1.40, 0.0], 1.70),   // 16 shoulder L
        j(Some(15), [-0.18, 1.40, 0.0], 1.70),  // 17 shoulder R
        j(Some(16), [0.21, 1.12, 0.0], 2.40),   // 18 elbow L
        j(Some(17), [-0.21, 1.12, 0.0], 2.40),  // 19 elbow R
        j(Some(18), [0.23, 0.86, 0.0], 0.80),   // 20 wrist L
        j(Some(19), [-0.23, 0.86, 0.0], 0.80),  // 21 wrist R
        j(Some(20), [0.235, 0.78, 0.0], 1.00),  // 22 hand root L
        j(Some(21), [-0.235, 0.78, 0.0], 1.00), // 23 hand root R
    ]
}

enum Skin {
    /// Full weight on one joint.
    Single(usize),
    /// Weight ramps from the near joint to 50/50 with the far joint along
    /// the part axis.
    Bone { near: usize, far: usize },
    /// Interpolate along the torso chain by height.
    Chain(&'static [usize]),
}

struct PartSpec {
    label: PartLabel,
    /// Mirrored part also emitted with x negated and the mirrored label.
    mirror: Option<PartLabel>,
    p0: [f64; 3],
    p1: [f64; 3],
    r_a: f64,
    r_b: f64,
    rings: usize,
    segs: usize,
    skin: Skin,
    mirror_skin: Option<Skin>,
}

const TORSO_CHAIN: [usize; 5] = [0, 1, 2, 3, 4];

fn part_table() -> Vec<PartSpec> {
    use PartLabel::*;
    let p = |label,
             mirror,
             p0,
             p1,
             r_a,
             r_b,
             rings,
             segs,
             skin,
             mirror_skin| PartSpec { label, mirror, p0, p1, r_a, r_b, rings, segs, skin, mirror_skin };
    vec![
        // 9 rings x 14 segs + 2 poles = 128
        p(Head, None, [0.0, 1.52, 0.0], [0.0, 1.72, 0.0], 0.095, 0.095, 9, 14, Skin::Single(5), None),
        // torso front/back split happens after generation; 10x18+2 = 182
        p(TorsoFront, None, [0.0, 0.93, 0.0], [0.0, 1.47, 0.0], 0.155, 0.105, 10, 18, Skin::Chain(&TORSO_CHAIN), None),
        // 6x16+2 = 98
        p(Gluteus, None, [0.0, 0.83, -0.03], [0.0, 0.99, -0.03], 0.155, 0.13, 6, 16, Skin::Single(0), None),
        // 6x12+2 = 74 each
        p(ThighL, Some(ThighR), [0.09, 0.90, 0.0], [0.10, 0.50, 0.0], 0.075, 0.075, 6, 12,
          Skin::Bone { near: 6, far: 8 }, Some(Skin::Bone { near: 7, far: 9 })),
        // 6x10+2 = 62 each
        p(CalfL, Some(CalfR), [0.10, 0.50, 0.0], [0.10, 0.08, 0.0], 0.055, 0.055, 6, 10,
          Skin::Bone { near: 8, far: 10 }, Some(Skin::Bone { near: 9, far: 11 })),
        // 4x10+2 = 42 each
        p(FootL, Some(FootR), [0.10, 0.042, -0.05], [0.10, 0.038, 0.15], 0.05, 0.04, 4, 10,
          Skin::Bone { near: 10, far: 12 }, Some(Skin::Bone { near: 11, far: 13 })),
        // 5x10+2 = 52 each
        p(UpperArmL, Some(UpperArmR), [0.18, 1.40, 0.0], [0.21, 1.12, 0.0], 0.047, 0.047, 5, 10,
          Skin::Bone { near: 16, far: 18 }, Some(Skin::Bone { near: 17, far: 19 })),
        p(ForearmL, Some(ForearmR), [0.21, 1.12, 0.0], [0.23, 0.86, 0.0], 0.04, 0.04, 5, 10,
          Skin::Bone { near: 18, far: 20 }, Some(Skin::Bone { near: 19, far: 21 })),
        // 3x8+2 = 26 each
        p(HandL, Some(HandR), [0.235, 0.84, 0.0], [0.235, 0.70, 0.01], 0.045, 0.022, 3, 8,
          Skin::Single(22), Some(Skin::Single(23))),
    ]
}

struct MeshBuilder {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    labels: Vec<PartLabel>,
    weights: Vec<(usize, [f64; 2], [usize; 2])>, // vertex -> (weights, joints)
}

fn v3(a: [f64; 3]) -> Vec3<f64> {
    Vec3::new(a[0], a[1], a[2])
}

/// Ellipsoid stretched between two pole points, cross radii `r_a` along a
/// horizontal-ish axis and `r_b` along the remaining axis.
fn emit_part(out: &mut MeshBuilder, spec: &PartSpec, mirror: bool, joints: &[JointSpec]) {
    let (mut p0, mut p1) = (v3(spec.p0), v3(spec.p1));
    if mirror {
        p0.x = -p0.x;
        p1.x = -p1.x;
    }
    let center = (p0 + p1) * 0.5;
    let axis = p1 - p0;
    let half = axis.norm() * 0.5;
    let u = axis / (2.0 * half);
    let zhat = Vec3::new(0.0, 0.0, 1.0);
    let mut e1 = u.cross(zhat);
    if e1.norm() < 1e-6 {
        e1 = Vec3::new(1.0, 0.0, 0.0);
    } else {
        e1 = e1.normalized();
    }
    let e2 = u.cross(e1);

    let base = out.vertices.len();
    let label_of = |p: Vec3<f64>| -> PartLabel {
        if spec.label == PartLabel::TorsoFront && !mirror {
            if p.z > 0.0 {
                PartLabel::TorsoFront
            } else {
                PartLabel::TorsoBack
            }
        } else if mirror {
            spec.mirror.unwrap_or(spec.label)
        } else {
            spec.label
        }
    };
    let skin = if mirror {
        spec.mirror_skin.as_ref().unwrap_or(&spec.skin)
    } else {
        &spec.skin
    };

    let mut push = |p: Vec3<f64>| {
        let idx = out.vertices.len();
        out.vertices.push([p.x, p.y, p.z]);
        out.labels.push(label_of(p));
        let (w, j) = skin_weights_for(skin, p, p0, p1, joints);
        out.weights.push((idx, w, j));
    };

    // Pole at the p0 side, rings from p0 to p1, pole at the p1 side.
    push(center - u * half);
    let (rings, segs) = (spec.rings, spec.segs);
    for i in 1..=rings {
        let phi = std::f64::consts::PI * i as f64 / (rings + 1) as f64;
        let (s, c) = phi.sin_cos();
        for k in 0..segs {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / segs as f64;
            let p = center - u * (half * c)
                + e1 * (spec.r_a * s * theta.cos())
                + e2 * (spec.r_b * s * theta.sin());
            push(p);
        }
    }
    push(center + u * half);
    let top = base;
    let bottom = out.vertices.len() - 1;

    for k in 0..segs {
        out.faces.push([top, base + 1 + (k + 1) % segs, base + 1 + k]);
    }
    for i in 0..rings - 1 {
        let a = base + 1 + i * segs;
        let b = a + segs;
        for k in 0..segs {
            let k1 = (k + 1) % segs;
            out.faces.push([a + k, a + k1, b + k1]);
            out.faces.push([a + k, b + k1, b + k]);
        }
    }
    let last = base + 1 + (rings - 1) * segs;
    for k in 0..segs {
        out.faces.push([bottom, last + k, last + (k + 1) % segs]);
    }
}

fn skin_weights_for(
    skin: &Skin,
    p: Vec3<f64>,
    p0: Vec3<f64>,
    p1: Vec3<f64>,
    joints: &[JointSpec],
) -> ([f64; 2], [usize; 2]) {
    match skin {
        Skin::Single(j) => ([1.0, 0.0], [*j, *j]),
        Skin::Bone { near, far } => {
            let axis = p1 - p0;
            let s = ((p - p0).dot(axis) / axis.norm_sq()).clamp(0.0, 1.0);
            let w_far = 0.5 * ((s - 0.55) / 0.45).clamp(0.0, 1.0);
            ([1.0 - w_far, w_far], [*near, *far])
        }
        Skin::Chain(chain) => {
            let y = p.y;
            let mut lo = chain[0];
            let mut hi = chain[chain.len() - 1];
            for pair in chain.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if y <= joints[a].pos[1] {
                    return ([1.0, 0.0], [a, a]);
                }
                if y <= joints[b].pos[1] {
                    lo = a;
                    hi = b;
                    let t = (y - joints[a].pos[1]) / (joints[b].pos[1] - joints[a].pos[1]);
                    return ([1.0 - t, t], [lo, hi]);
                }
            }
            let _ = (lo, hi);
            let last = chain[chain.len() - 1];
            ([1.0, 0.0], [last, last])
        }
    }
}

fn leg_parts(l: PartLabel) -> bool {
    use PartLabel::*;
    matches!(l, ThighL | ThighR | CalfL | CalfR | FootL | FootR)
}

fn arm_parts(l: PartLabel) -> bool {
    use PartLabel::*;
    matches!(l, UpperArmL | UpperArmR | ForearmL | ForearmR | HandL | HandR)
}

fn torso_parts(l: PartLabel) -> bool {
    use PartLabel::*;
    matches!(l, TorsoFront | TorsoBack | Gluteus)
}

/// Shape blendshape offsets for vertex `p` with part label `l`.
/// Axes: stature, torso width, torso depth, frame width, leg length,
/// arm length, head size, shoulder width, belly, foot size.
fn blend_offset(axis: usize, p: Vec3<f64>, l: PartLabel) -> Vec3<f64> {
    use PartLabel::*;
    let z = Vec3::zero();
    match axis {
        0 => Vec3::new(0.0, 0.08 * p.y, 0.0),
        1 => {
            if torso_parts(l) {
                Vec3::new(0.06 * p.x, 0.0, 0.0)
            } else {
                z
            }
        }
        2 => {
            if torso_parts(l) {
                Vec3::new(0.0, 0.0, 0.05 * p.z)
            } else {
                z
            }
        }
        3 => Vec3::new(0.05 * p.x, 0.0, 0.0),
        4 => {
            if leg_parts(l) {
                Vec3::new(0.0, 0.10 * (p.y - 0.95), 0.0)
            } else {
                z
            }
        }
        5 => {
            if arm_parts(l) {
                Vec3::new(0.0, 0.10 * (p.y - 1.40), 0.0)
            } else {
                z
            }
        }
        6 => {
            if l == Head {
                (p - Vec3::new(0.0, 1.62, 0.0)) * 0.15
            } else {
                z
            }
        }
        7 => {
            if arm_parts(l) {
                Vec3::new(0.06 * p.x, 0.0, 0.0)
            } else {
                z
            }
        }
        8 => {
            if l == TorsoFront && p.z > 0.0 {
                Vec3::new(0.0, 0.0, 0.07 * p.z)
            } else {
                z
            }
        }
        _ => {
            if matches!(l, FootL | FootR) {
                let cx = if l == FootL { 0.10 } else { -0.10 };
                (p - Vec3::new(cx, 0.04, 0.05)) * 0.15
            } else {
                z
            }
        }
    }
}

/// Build the default template for a seed. The seed drives the pose decoder
/// matrix; the mesh itself is fixed by the part table.
pub fn build_template<T: Real>(seed: u64) -> BodyTemplate<T> {
    let joints = joint_table();
    let mut mb = MeshBuilder {
        vertices: Vec::new(),
        faces: Vec::new(),
        labels: Vec::new(),
        weights: Vec::new(),
    };
    for spec in part_table() {
        emit_part(&mut mb, &spec, false, &joints);
        if spec.mirror.is_some() {
            emit_part(&mut mb, &spec, true, &joints);
        }
    }
    let v = mb.vertices.len();
    debug_assert_eq!(v, 1024, "part table should produce exactly 1024 vertices");

    // Dense row-stochastic skinning matrix.
    let mut weights = vec![0.0f64; v * JOINT_COUNT];
    for (idx, w, j) in &mb.weights {
        weights[idx * JOINT_COUNT + j[0]] += w[0];
        weights[idx * JOINT_COUNT + j[1]] += w[1];
    }

    // Joint regressor: average of the 8 nearest rest vertices. Rest joints
    // are then *defined* as regressor x rest vertices so shape blends move
    // the skeleton consistently.
    let mut regressor = vec![0.0f64; JOINT_COUNT * v];
    for (j, js) in joints.iter().enumerate() {
        let jp = v3(js.pos);
        let mut dists: Vec<(usize, f64)> = mb
            .vertices
            .iter()
            .enumerate()
            .map(|(i, &p)| (i, (v3(p) - jp).norm_sq()))
            .collect();
        dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        for (i, _) in dists.iter().take(8) {
            regressor[j * v + i] = 0.125;
        }
    }
    let rest_joints: Vec<Vec3<f64>> = (0..JOINT_COUNT)
        .map(|j| {
            let mut acc = Vec3::zero();
            for (i, &p) in mb.vertices.iter().enumerate() {
                let w = regressor[j * v + i];
                if w != 0.0 {
                    acc += v3(p) * w;
                }
            }
            acc
        })
        .collect();

    // Blendshapes.
    let mut blends = vec![0.0f64; 10 * 3 * v];
    for axis in 0..10 {
        for (i, &p) in mb.vertices.iter().enumerate() {
            let o = blend_offset(axis, v3(p), mb.labels[i]);
            blends[axis * 3 * v + 3 * i] = o.x;
            blends[axis * 3 * v + 3 * i + 1] = o.y;
            blends[axis * 3 * v + 3 * i + 2] = o.z;
        }
    }

    // Seeded pose decoder, rows rescaled so any latent keeps each component
    // of joint j within 0.9 * limit(j).
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut decoder = vec![0.0f64; 3 * POSE_JOINTS * 32];
    for val in decoder.iter_mut() {
        *val = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    // Latent axis 0 is dedicated to hip/knee flexion: with purely random
    // rows the four flexion components cannot be driven near their limits
    // simultaneously, which sitting needs.
    for (joint, sign) in [(6usize, -1.0f64), (7, -1.0), (8, 1.0), (9, 1.0)] {
        let row = joint * 3;
        for k in 1..32 {
            decoder[row * 32 + k] *= 0.1;
        }
        decoder[row * 32] = sign * 20.0;
    }
    for j in 0..POSE_JOINTS {
        for axis in 0..3 {
            let row = j * 3 + axis;
            let l1: f64 = decoder[row * 32..(row + 1) * 32].iter().map(|x| x.abs()).sum();
            let target = 0.9 * joints[j].limit;
            let scale = if l1 > 0.0 { target / l1 } else { 0.0 };
            for x in &mut decoder[row * 32..(row + 1) * 32] {
                *x *= scale;
            }
        }
    }

    let hand_curl_weights = vec![0.08f64; 12];

    let conv = |vals: &[f64]| -> Vec<T> { vals.iter().map(|&x| T::cst(x)).collect() };
    BodyTemplate {
        seed,
        rest_vertices: mb.vertices.iter().map(|&p| {
            Vec3::new(T::cst(p[0]), T::cst(p[1]), T::cst(p[2]))
        }).collect(),
        faces: mb.faces,
        part_labels: mb.labels,
        parents: joints.iter().map(|j| j.parent).collect(),
        rest_joints: rest_joints
            .iter()
            .map(|p| Vec3::new(T::cst(p.x), T::cst(p.y), T::cst(p.z)))
            .collect(),
        joint_regressor: Tensor::new(&[JOINT_COUNT, v], conv(&regressor)).expect("regressor"),
        skin_weights: Tensor::new(&[v, JOINT_COUNT], conv(&weights)).expect("weights"),
        blendshapes: Tensor::new(&[10, 3 * v], conv(&blends)).expect("blends"),
        joint_limits: joints.iter().map(|j| T::cst(j.limit)).collect(),
        pose_decoder: Tensor::new(&[3 * POSE_JOINTS, 32], conv(&decoder)).expect("decoder"),
        decoder_gain: T::one(),
        hand_curl_weights: conv(&hand_curl_weights),
    }
}

// ---- file format ----

const FMT: &str = "PSBT body template";

pub fn write_template<T: Real>(path: &Path, t: &BodyTemplate<T>) -> Result<(), BodyError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TEMPLATE_MAGIC)?;
    w.write_all(&TEMPLATE_VERSION.to_le_bytes())?;
    w.write_all(&t.seed.to_le_bytes())?;
    let v = t.rest_vertices.len() as u32;
    let f = t.faces.len() as u32;
    w.write_all(&v.to_le_bytes())?;
    w.write_all(&f.to_le_bytes())?;
    let wf = |w: &mut BufWriter<File>, x: T| w.write_all(&x.to_f64_lossy().to_le_bytes());
    for p in &t.rest_vertices {
        for c in [p.x, p.y, p.z] {
            wf(&mut w, c)?;
        }
    }
    for face in &t.faces {
        for &i in face {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
    }
    for &l in &t.part_labels {
        w.write_all(&[l as u8])?;
    }
    for p in &t.parents {
        let code: i32 = p.map_or(-1, |x| x as i32);
        w.write_all(&code.to_le_bytes())?;
    }
    for p in &t.rest_joints {
        for c in [p.x, p.y, p.z] {
            wf(&mut w, c)?;
        }
    }
    for &x in t.joint_regressor.values() {
        wf(&mut w, x)?;
    }
    for &x in t.skin_weights.values() {
        wf(&mut w, x)?;
    }
    for &x in t.blendshapes.values() {
        wf(&mut w, x)?;
    }
    for &x in &t.joint_limits {
        wf(&mut w, x)?;
    }
    for &x in t.pose_decoder.values() {
        wf(&mut w, x)?;
    }
    for &x in &t.hand_curl_weights {
        wf(&mut w, x)?;
    }
    wf(&mut w, t.decoder_gain)?;
    w.flush()?;
    Ok(())
}

pub fn read_template<T: Real>(path: &Path) -> Result<BodyTemplate<T>, BodyError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], BodyError> {
        if *pos + n > buf.len() {
            return Err(BodyError::format(FMT, "truncated file"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != TEMPLATE_MAGIC {
        return Err(BodyError::format(FMT, "bad magic, expected \"PSBT\""));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != TEMPLATE_VERSION {
        return Err(BodyError::format(FMT, format!("unsupported version {version}")));
    }
    let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let v = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let rf = |pos: &mut usize| -> Result<T, BodyError> {
        let raw = take(pos, 8)?;
        Ok(T::cst(f64::from_le_bytes(raw.try_into().unwrap())))
    };
    let mut rest_vertices = Vec::with_capacity(v);
    for _ in 0..v {
        let (x, y, z) = (rf(&mut pos)?, rf(&mut pos)?, rf(&mut pos)?);
        rest_vertices.push(Vec3::new(x, y, z));
    }
    let mut faces = Vec::with_capacity(f);
    for _ in 0..f {
        let mut face = [0usize; 3];
        for slot in &mut face {
            *slot = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        faces.push(face);
    }
    let mut part_labels = Vec::with_capacity(v);
    for _ in 0..v {
        let code = take(&mut pos, 1)?[0];
        part_labels.push(
            PartLabel::from_u8(code)
                .ok_or_else(|| BodyError::format(FMT, format!("bad part label {code}")))?,
        );
    }
    let mut parents = Vec::with_capacity(JOINT_COUNT);
    for _ in 0..JOINT_COUNT {
        let code = i32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        parents.push(if code < 0 { None } else { Some(code as usize) });
    }
    let mut rest_joints = Vec::with_capacity(JOINT_COUNT);
    for _ in 0..JOINT_COUNT {
        let (x, y, z) = (rf(&mut pos)?, rf(&mut pos)?, rf(&mut pos)?);
        rest_joints.push(Vec3::new(x, y, z));
    }
    let read_tensor = |pos: &mut usize, shape: &[usize]| -> Result<Tensor<T>, BodyError> {
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(rf(pos)?);
        }
        Ok(Tensor::new(shape, vals).expect("tensor shape"))
    };
    let joint_regressor = read_tensor(&mut pos, &[JOINT_COUNT, v])?;
    let skin_weights = read_tensor(&mut pos, &[v, JOINT_COUNT])?;
    let blendshapes = read_tensor(&mut pos, &[10, 3 * v])?;
    let mut joint_limits = Vec::with_capacity(JOINT_COUNT);
    for _ in 0..JOINT_COUNT {
        joint_limits.push(rf(&mut pos)?);
    }
    let pose_decoder = read_tensor(&mut pos, &[3 * POSE_JOINTS, 32])?;
    let mut hand_curl_weights = Vec::with_capacity(12);
    for _ in 0..12 {
        hand_curl_weights.push(rf(&mut pos)?);
    }
    let decoder_gain = rf(&mut pos)?;
    if pos != buf.len() {
        return Err(BodyError::format(FMT, format!("{} trailing bytes", buf.len() - pos)));
    }
    let t = BodyTemplate {
        seed,
        rest_vertices,
        faces,
        part_labels,
        parents,
        rest_joints,
        joint_regressor,
        skin_weights,
        blendshapes,
        joint_limits,
        pose_decoder,
        decoder_gain,
        hand_curl_weights,
    };
    t.validate()?;
    Ok(t)
}
