//! Geometry invariants checked against independent oracles: projection
//! round trips, z-buffer correctness via ray casting, trilinear gradients
//! via finite differences.

use proptest::prelude::*;

use inhabit_core::diff::gradcheck;
use inhabit_core::geom::{compute_sdf, rasterize};
use inhabit_core::synth::{synth_room, unit_cube_room, Facing, Furniture, RoomSpec};
use inhabit_core::{Camera, RigidTransform, TriMesh, Vec3};

fn camera() -> Camera {
    Camera::new(
        Camera::default_intrinsics(),
        RigidTransform::identity(),
        480,
        270,
        10.0,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn project_unproject_roundtrip(
        ux in -0.9f64..0.9,
        uy in -0.9f64..0.9,
        z in 0.05f64..9.9,
    ) {
        // Points parameterized inside the view frustum.
        let cam = camera();
        let x = ux * z * 239.5 / 233.826;
        let y = uy * z * 134.5 / 233.826;
        let p = Vec3::new(x, y, z);
        let n = cam.project(&[p]).unwrap()[0];
        let back = cam.unproject(&[n]).unwrap()[0];
        prop_assert!((back - p).norm() < 1e-9, "{back:?} vs {p:?}");
    }

    #[test]
    fn unproject_project_roundtrip(
        u in -0.95f64..0.95,
        v in -0.95f64..0.95,
        w in -0.98f64..0.98,
    ) {
        let cam = camera();
        let c = Vec3::new(u, v, w);
        let p = cam.unproject(&[c]).unwrap()[0];
        let back = cam.project(&[p]).unwrap()[0];
        prop_assert!((back - c).norm() < 1e-9);
    }
}

/// Ray-cast oracle: z-buffered depth equals the nearest ray-triangle
/// intersection at sampled pixels of a convex room scene.
#[test]
fn rasterized_depth_matches_ray_casting() {
    let mut spec = RoomSpec::empty(4.0, 3.5, 2.6, 3);
    spec.furniture.push(Furniture {
        category: inhabit_core::synth::category::TABLE,
        min: [1.4, 0.0, 1.2],
        max: [2.6, 0.7, 2.0],
        facing: Facing::PosZ,
    });
    let mesh: TriMesh = synth_room(&spec).unwrap();
    let cam = Camera::new(
        Camera::default_intrinsics(),
        RigidTransform::new(
            inhabit_core::Mat3::identity(),
            Vec3::new(2.0, 1.6, 0.3),
        )
        .unwrap(),
        480,
        270,
        10.0,
    )
    .unwrap();
    let view = rasterize(&mesh, &cam);

    let world_to_cam = cam.world_to_cam();
    let tris: Vec<[Vec3; 3]> = mesh
        .faces
        .iter()
        .map(|f| {
            [
                world_to_cam.apply(mesh.vertices[f[0]]),
                world_to_cam.apply(mesh.vertices[f[1]]),
                world_to_cam.apply(mesh.vertices[f[2]]),
            ]
        })
        .collect();

    let k = &cam.intrinsics.m;
    let ray_depth = |px: usize, py: usize| -> f64 {
        let dir = Vec3::new(
            (px as f64 + 0.5 - k[0][2]) / k[0][0],
            (py as f64 + 0.5 - k[1][2]) / k[1][1],
            1.0,
        );
        let mut best = f64::INFINITY;
        for t in &tris {
            let n = (t[1] - t[0]).cross(t[2] - t[0]);
            let denom = n.dot(dir);
            if denom.abs() < 1e-14 {
                continue;
            }
            let tt = n.dot(t[0]) / denom;
            if tt <= 0.01 {
                continue;
            }
            let q = dir * tt;
            let area = |a: Vec3, b: Vec3, c: Vec3| (b - a).cross(c - a).dot(n);
            let w0 = area(t[1], t[2], q);
            let w1 = area(t[2], t[0], q);
            let w2 = area(t[0], t[1], q);
            if (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0) {
                best = best.min(tt);
            }
        }
        best
    };

    for py in (3..270).step_by(31) {
        for px in (5..480).step_by(37) {
            let d = view.depth_at(px, py);
            let expect = ray_depth(px, py);
            assert!(
                (d - expect).abs() < 1e-6,
                "pixel ({px},{py}): raster {d} vs ray {expect}"
            );
        }
    }
}

#[test]
fn trilinear_gradient_matches_finite_differences() {
    let room = unit_cube_room::<f64>(2.0);
    let grid = compute_sdf(&room, [15, 15, 15], 0.25).unwrap();
    let mut seed = 0x3c6ef372fe94f82au64;
    let mut next = move || {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((seed >> 11) as f64) / ((1u64 << 53) as f64)
    };
    for _ in 0..200 {
        let p = [
            0.15 + 1.7 * next(),
            0.15 + 1.7 * next(),
            0.15 + 1.7 * next(),
        ];
        let (_, grad, clamped) = grid.sample(Vec3::new(p[0], p[1], p[2]));
        assert!(!clamped);
        let fd = gradcheck::finite_diff(
            &mut |x: &[f64]| grid.sample(Vec3::new(x[0], x[1], x[2])).0,
            &p,
            1e-6,
        );
        for (a, b) in [grad.x, grad.y, grad.z].iter().zip(&fd) {
            assert!(
                gradcheck::grads_close(*a, *b, 1e-4, 1e-7),
                "gradient {a} vs fd {b} at {p:?}"
            );
        }
    }
}
