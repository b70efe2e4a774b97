//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Heavy fixtures (the synthetic dataset and the trained generator) are
//! built once and shared.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use inhabit_core::body::{
    body_mesh, build_body_graph, build_template, contact_vertices, world_verts_graph,
    DEFAULT_CONTACT_PARTS,
};
use inhabit_core::cvae::{
    encode_scene, hs_start_epoch, new_model, s1_forward, s2_forward, sample, train, Arch,
    CvaeModel, EpochRecord, ModelConfig, SceneTensor, TrainSchedule,
};
use inhabit_core::data::{
    build_train_data, generate_dataset, load_view, read_samples, DatasetConfig, Split,
};
use inhabit_core::diff::gradcheck::{finite_diff_subset, grads_close};
use inhabit_core::diff::{Graph, Tensor};
use inhabit_core::fit::{fit_body, FitConfig, FitContext};
use inhabit_core::geom::{compute_sdf, PointGrid};
use inhabit_core::Vec3;
use inhabit_core::loss::{
    loss_collision, loss_contact, loss_fitting, loss_kl, loss_reconstruction, loss_vposer,
    LossWeights,
};
use inhabit_core::metrics::{
    derive_pose_prior, diversity_metric, occupied_clusters, physical_metric, prior_regularizer,
    prior_regularizer_grad,
};
use inhabit_core::synth::{category, unit_cube_room};
use inhabit_core::{BodyParams, BodyTemplate, Camera, RigidTransform, SdfGrid, TriMesh};

const GRAD_RTOL: f64 = 1e-4;
const GRAD_ATOL: f64 = 1e-7;
const FD_STEP: f64 = 1e-5;
/// Step for losses with piecewise-smooth geometry terms (trilinear cells,
/// nearest-neighbor switches): a smaller step keeps probes off the measure-
/// zero derivative seams while staying far above f64 roundoff.
const FD_STEP_GEOM: f64 = 1e-6;

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

struct DatasetFixture {
    root: PathBuf,
    template: Arc<BodyTemplate>,
    build_secs: f64,
}

static DATASET: OnceLock<DatasetFixture> = OnceLock::new();

fn dataset() -> &'static DatasetFixture {
    DATASET.get_or_init(|| {
        let root = tmp_root().join("dataset");
        let template: BodyTemplate = build_template(7);
        let start = Instant::now();
        if !root.join("samples.jsonl").exists() {
            let cfg = DatasetConfig::default();
            let summary = generate_dataset(&root, &cfg, &template).expect("dataset generation");
            inhabit_core::body::write_template(&root.join("template.psbt"), &template)
                .expect("template write");
            eprintln!(
                "[fixture] dataset: {} train / {} val / {} test",
                summary.train, summary.val, summary.test
            );
        }
        DatasetFixture {
            root,
            template: Arc::new(template),
            build_secs: start.elapsed().as_secs_f64(),
        }
    })
}

struct TrainedFixture {
    model: CvaeModel,
    records: Vec<EpochRecord>,
    train_secs: f64,
}

static TRAINED: OnceLock<TrainedFixture> = OnceLock::new();

fn trained() -> &'static TrainedFixture {
    TRAINED.get_or_init(|| {
        let ds = dataset();
        let model_path = tmp_root().join("trained-s1.psiw");
        let log_path = tmp_root().join("trained-s1.jsonl");
        if model_path.exists() && log_path.exists() {
            // Reuse the cached run (the dataset fixture is seeded, so the
            // cached model corresponds to it).
            let model = inhabit_core::cvae::load_model(&model_path).expect("cached model");
            let text = std::fs::read_to_string(&log_path).expect("cached log");
            let records: Vec<EpochRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).expect("cached record"))
                .collect();
            let train_secs = std::fs::read_to_string(tmp_root().join("trained-s1.secs"))
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0.0);
            return TrainedFixture { model, records, train_secs };
        }
        let data = build_train_data(
            &ds.root,
            ds.template.clone(),
            &category::SUBSET,
            &DEFAULT_CONTACT_PARTS,
            0.15,
        )
        .expect("train data");
        let mut model = new_model(ModelConfig::s1(category::SUBSET.to_vec()), 1);
        let schedule = TrainSchedule::default();
        let weights = LossWeights::default();
        let start = Instant::now();
        let records = train(&mut model, &data, &schedule, &weights).expect("training");
        let train_secs = start.elapsed().as_secs_f64();
        eprintln!(
            "[fixture] trained {} epochs in {train_secs:.0}s: val_rec {:.4} -> {:.4}",
            records.len(),
            records[0].val_rec,
            records.last().unwrap().val_rec
        );
        inhabit_core::cvae::save_model(&model_path, &model).expect("cache model");
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        std::fs::write(&log_path, text).expect("cache log");
        std::fs::write(tmp_root().join("trained-s1.secs"), format!("{train_secs}\n")).expect("cache secs");
        TrainedFixture { model, records, train_secs }
    })
}

fn test_room_view(n_th: usize) -> (String, String) {
    let ds = dataset();
    let samples = read_samples(&ds.root).expect("samples");
    let test: Vec<_> = samples.iter().filter(|r| r.split == Split::Test).collect();
    assert!(!test.is_empty(), "dataset has a held-out room");
    let rec = test[n_th % test.len()];
    (rec.scene_id.clone(), rec.view.clone())
}

fn random_feature(rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..75).map(|_| rng.random_range(-0.6..0.6)).collect();
    x[2] = rng.random_range(1.8..6.0); // translation depth in front of the camera
    x[3] += 1.0; // keep the 6D rotation well-conditioned
    x[7] += 1.0;
    x
}

fn identity_camera() -> Camera {
    Camera::new(
        Camera::default_intrinsics(),
        RigidTransform::identity(),
        480,
        270,
        10.0,
    )
    .unwrap()
}

fn check_grad_subset(
    label: &str,
    ad: &[f64],
    x0: &[f64],
    coords: &[usize],
    eval: &mut dyn FnMut(&[f64]) -> f64,
) {
    check_grad_subset_h(label, ad, x0, coords, FD_STEP, eval)
}

fn check_grad_subset_h(
    label: &str,
    ad: &[f64],
    x0: &[f64],
    coords: &[usize],
    step: f64,
    eval: &mut dyn FnMut(&[f64]) -> f64,
) {
    let fd = finite_diff_subset(eval, x0, coords, step);
    for (k, &c) in coords.iter().enumerate() {
        assert!(
            grads_close(ad[c], fd[k], GRAD_RTOL, GRAD_ATOL),
            "{label}: coord {c}: reverse-mode {} vs finite-difference {}",
            ad[c],
            fd[k]
        );
    }
}

/// Criterion 1: reverse-mode gradients of every loss and both network
/// forwards match central finite differences (20 random points each,
/// relative error <= 1e-4) in under two minutes.
#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let template: BodyTemplate = build_template(7);
    let camera = identity_camera();
    let room = unit_cube_room::<f64>(2.4);
    let sdf = Arc::new(compute_sdf(&room, [24, 24, 24], 0.3).unwrap());
    let refined = room.refined(0.2);
    let scene_points = Arc::new(PointGrid::build(refined.vertices.clone(), 0.2));
    let contact_idx = Arc::new(contact_vertices(&template, &DEFAULT_CONTACT_PARTS));
    let weights = LossWeights::default();

    let mut rng = ChaCha12Rng::seed_from_u64(10_101);
    for point in 0..20 {
        // Eq. 2 reconstruction, differentiated through the projection.
        let x_ref = random_feature(&mut rng);
        let x_rec = random_feature(&mut rng);
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::from_vec(x_ref.clone()));
        let b = g.param(Tensor::from_vec(x_rec.clone()));
        let l = loss_reconstruction(&mut g, a, b, &camera).unwrap();
        let ad = g.backward(l).unwrap().get(b).unwrap().values().to_vec();
        let coords: Vec<usize> = (0..75).collect();
        check_grad_subset("loss_reconstruction", &ad, &x_rec, &coords, &mut |x| {
            let mut g: Graph<f64> = Graph::new();
            let a = g.constant(Tensor::from_vec(x_ref.clone()));
            let b = g.constant(Tensor::from_vec(x.to_vec()));
            let l = loss_reconstruction(&mut g, a, b, &camera).unwrap();
            g.value(l).item()
        });

        // Eq. 3 KL.
        let mu: Vec<f64> = (0..32).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let mu_ref = g.param(Tensor::from_vec(mu.clone()));
        let lv_ref = g.param(Tensor::from_vec(lv.clone()));
        let l = loss_kl(&mut g, mu_ref, lv_ref).unwrap();
        let grads = g.backward(l).unwrap();
        let ad_mu = grads.get(mu_ref).unwrap().values().to_vec();
        let ad_lv = grads.get(lv_ref).unwrap().values().to_vec();
        let coords: Vec<usize> = (0..32).collect();
        check_grad_subset("loss_kl/mu", &ad_mu, &mu, &coords, &mut |x| {
            let mut g: Graph<f64> = Graph::new();
            let m = g.constant(Tensor::from_vec(x.to_vec()));
            let v = g.constant(Tensor::from_vec(lv.clone()));
            let l = loss_kl(&mut g, m, v).unwrap();
            g.value(l).item()
        });
        check_grad_subset("loss_kl/log_var", &ad_lv, &lv, &coords, &mut |x| {
            let mut g: Graph<f64> = Graph::new();
            let m = g.constant(Tensor::from_vec(mu.clone()));
            let v = g.constant(Tensor::from_vec(x.to_vec()));
            let l = loss_kl(&mut g, m, v).unwrap();
            g.value(l).item()
        });

        // VPoser norm.
        let theta: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let t = g.param(Tensor::from_vec(theta.clone()));
        let l = loss_vposer(&mut g, t);
        let ad = g.backward(l).unwrap().get(t).unwrap().values().to_vec();
        check_grad_subset("loss_vposer", &ad, &theta, &coords, &mut |x| {
            x.iter().map(|v| v * v).sum()
        });

        // Eq. 5 collision and Eq. 6 contact w.r.t. vertex positions.
        let verts: Vec<f64> = (0..24 * 3).map(|_| rng.random_range(0.3..2.1)).collect();
        let mut g: Graph<f64> = Graph::new();
        let v = g.param(Tensor::new(&[24, 3], verts.clone()).unwrap());
        let l = loss_collision(&mut g, v, sdf.clone()).unwrap();
        let ad = g.backward(l).unwrap().get(v).unwrap().values().to_vec();
        let vcoords: Vec<usize> = (0..72).step_by(5).collect();
        let sdf_c = sdf.clone();
        check_grad_subset_h("loss_collision", &ad, &verts, &vcoords, FD_STEP_GEOM, &mut |x| {
            let mut g: Graph<f64> = Graph::new();
            let v = g.constant(Tensor::new(&[24, 3], x.to_vec()).unwrap());
            let l = loss_collision(&mut g, v, sdf_c.clone()).unwrap();
            g.value(l).item()
        });

        let mut g: Graph<f64> = Graph::new();
        let v = g.param(Tensor::new(&[24, 3], verts.clone()).unwrap());
        let idx = Arc::new((0..24).collect::<Vec<_>>());
        let l = loss_contact(&mut g, v, idx.clone(), scene_points.clone(), weights.geman_sigma).unwrap();
        let ad = g.backward(l).unwrap().get(v).unwrap().values().to_vec();
        let sp = scene_points.clone();
        let sigma = weights.geman_sigma;
        check_grad_subset_h("loss_contact", &ad, &verts, &vcoords, FD_STEP_GEOM, &mut |x| {
            let mut g: Graph<f64> = Graph::new();
            let v = g.constant(Tensor::new(&[24, 3], x.to_vec()).unwrap());
            let l = loss_contact(&mut g, v, idx.clone(), sp.clone(), sigma).unwrap();
            g.value(l).item()
        });

        // L_f through the full body chain; the body stays inside the room
        // so every vertex samples the SDF interior.
        let mut x0 = random_feature(&mut rng);
        x0[0] = rng.random_range(0.9..1.5);
        x0[1] = rng.random_range(0.9..1.3);
        x0[2] = rng.random_range(0.9..1.5);
        let mut x1 = x0.clone();
        for xi in x1.iter_mut() {
            *xi += rng.random_range(-0.05..0.05);
        }
        let eval_lf = |x: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let xh = g.constant(Tensor::from_vec(x.to_vec()));
            let x0t = g.constant(Tensor::from_vec(x0.clone()));
            let body = build_body_graph(&mut g, xh, &template).unwrap();
            let world = world_verts_graph(&mut g, body.verts_cam, &RigidTransform::identity()).unwrap();
            let fit = loss_fitting(
                &mut g,
                xh,
                x0t,
                body.theta_b,
                world,
                contact_idx.clone(),
                scene_points.clone(),
                sdf.clone(),
                &weights,
            )
            .unwrap();
            g.value(fit.total).item()
        };
        let mut g: Graph<f64> = Graph::new();
        let xh = g.param(Tensor::from_vec(x1.clone()));
        let x0t = g.constant(Tensor::from_vec(x0.clone()));
        let body = build_body_graph(&mut g, xh, &template).unwrap();
        let world = world_verts_graph(&mut g, body.verts_cam, &RigidTransform::identity()).unwrap();
        let fit = loss_fitting(
            &mut g,
            xh,
            x0t,
            body.theta_b,
            world,
            contact_idx.clone(),
            scene_points.clone(),
            sdf.clone(),
            &weights,
        )
        .unwrap();
        let ad = g.backward(fit.total).unwrap().get(xh).unwrap().values().to_vec();
        let lf_coords: Vec<usize> = (point % 3..75).step_by(3).collect();
        check_grad_subset_h("loss_fitting", &ad, &x1, &lf_coords, FD_STEP_GEOM, &mut |x| eval_lf(x));
    }

    // Both network forwards: gradients of a probe loss w.r.t. a sampled
    // subset of parameter coordinates.
    let check_network = |arch: Arch, label: &str| {
        let mut cfg = match arch {
            Arch::S1 => ModelConfig::s1(category::SUBSET.to_vec()),
            Arch::S2 => ModelConfig::s2(category::SUBSET.to_vec()),
        };
        cfg.hidden = 64;
        cfg.scene_code = 48;
        cfg.lift = 48;
        cfg.conv_channels = vec![4, 6, 8, 8, 12, 16];
        let model = new_model(cfg, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(777);
        let scene = SceneTensor {
            data: Tensor::from_fn(&[13, 128, 128], |_| rng.random_range(0.0..1.0)),
            channels: 13,
            content: (128, 128),
            depth_all_zero: false,
        };
        let x: Vec<f64> = random_feature(&mut rng);
        let eps_g: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
        let eps_l: Vec<f64> = (0..32).map(|_| rng.random_range(-0.5..0.5)).collect();

        let forward_value = |m: &CvaeModel| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let xh = g.constant(Tensor::from_vec(x.clone()));
            let (x_rec, mu, lv) = match arch {
                Arch::S1 => {
                    let f = s1_forward(&mut g, m, &scene, xh, &eps_l, false).unwrap();
                    (f.x_rec, f.mu, f.log_var)
                }
                Arch::S2 => {
                    let f = s2_forward(&mut g, m, &scene, xh, &eps_g, &eps_l, false).unwrap();
                    (f.x_rec, f.mu_l, f.log_var_l)
                }
            };
            let s1 = g.square(x_rec);
            let l1 = g.sum(s1);
            let s2 = g.square(mu);
            let l2 = g.sum(s2);
            let s3 = g.square(lv);
            let l3 = g.sum(s3);
            let l12 = g.add(l1, l2).unwrap();
            let l = g.add(l12, l3).unwrap();
            g.value(l).item()
        };

        // Reverse-mode gradients for all parameters at once.
        let mut g: Graph<f64> = Graph::new();
        let xh = g.constant(Tensor::from_vec(x.clone()));
        let (x_rec, mu, lv, refs) = match arch {
            Arch::S1 => {
                let f = s1_forward(&mut g, &model, &scene, xh, &eps_l, true).unwrap();
                (f.x_rec, f.mu, f.log_var, f.param_refs)
            }
            Arch::S2 => {
                let f = s2_forward(&mut g, &model, &scene, xh, &eps_g, &eps_l, true).unwrap();
                (f.x_rec, f.mu_l, f.log_var_l, f.param_refs)
            }
        };
        let s1 = g.square(x_rec);
        let l1 = g.sum(s1);
        let s2 = g.square(mu);
        let l2 = g.sum(s2);
        let s3 = g.square(lv);
        let l3 = g.sum(s3);
        let l12 = g.add(l1, l2).unwrap();
        let l = g.add(l12, l3).unwrap();
        let grads = g.backward(l).unwrap();

        // 20 random (parameter, coordinate) probes by finite differences.
        let names = model.param_names();
        let mut probe_rng = ChaCha12Rng::seed_from_u64(31 + arch as u64);
        for _ in 0..20 {
            let pi = probe_rng.random_range(0..names.len());
            let mut probed = model.clone();
            let (coord, ad_val) = {
                let g_t = grads.get(refs[pi]).unwrap();
                let coord = probe_rng.random_range(0..g_t.numel());
                (coord, g_t.values()[coord])
            };
            let base = {
                let params = probed.params_mut();
                params[pi].1.values()[coord]
            };
            let mut eval_at = |v: f64| -> f64 {
                {
                    let mut params = probed.params_mut();
                    params[pi].1.values_mut()[coord] = v;
                }
                forward_value(&probed)
            };
            let fp = eval_at(base + FD_STEP);
            let fm = eval_at(base - FD_STEP);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            assert!(
                grads_close(ad_val, fd, GRAD_RTOL, GRAD_ATOL),
                "{label} {}[{coord}]: reverse-mode {ad_val} vs finite-difference {fd}",
                names[pi]
            );
        }
    };
    check_network(Arch::S1, "s1_forward");
    check_network(Arch::S2, "s2_forward");

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s (budget 120s)");
    println!("criterion 1 (gradient suite): PASS ({elapsed:.1}s)");
}

// Independent point-triangle distance: explicit candidate set (plane
// projection when its barycentrics are interior, the three clamped edge
// segments, the three vertices).
fn oracle_point_triangle(p: Vec3, tri: &[Vec3; 3]) -> f64 {
    let mut best = f64::INFINITY;
    for v in tri {
        best = best.min((p - *v).norm());
    }
    for (a, b) in [(0, 1), (1, 2), (2, 0)] {
        let (a, b) = (tri[a], tri[b]);
        let ab = b - a;
        let t = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
        best = best.min((p - (a + ab * t)).norm());
    }
    let n = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
    let nn = n.norm_sq();
    if nn > 0.0 {
        let q = p - n * ((p - tri[0]).dot(n) / nn);
        // Interior test via barycentric signs.
        let area = |a: Vec3, b: Vec3, c: Vec3| (b - a).cross(c - a).dot(n);
        let w0 = area(tri[1], tri[2], q);
        let w1 = area(tri[2], tri[0], q);
        let w2 = area(tri[0], tri[1], q);
        if (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0) {
            best = best.min((p - q).norm());
        }
    }
    best
}

/// Independent crossing counter along a fixed irrational direction.
fn oracle_inside(p: Vec3, mesh: &TriMesh) -> bool {
    let dir = Vec3::new(1.0, 0.6180339887498949, 0.2847006554165742).normalized();
    let mut crossings = 0usize;
    for f in &mesh.faces {
        let tri = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
        let n = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
        let denom = n.dot(dir);
        if denom.abs() < 1e-14 {
            continue;
        }
        let t = n.dot(tri[0] - p) / denom;
        if t <= 0.0 {
            continue;
        }
        let q = p + dir * t;
        let area = |a: Vec3, b: Vec3, c: Vec3| (b - a).cross(c - a).dot(n);
        let w0 = area(tri[1], tri[2], q);
        let w1 = area(tri[2], tri[0], q);
        let w2 = area(tri[0], tri[1], q);
        if (w0 > 0.0 && w1 > 0.0 && w2 > 0.0) || (w0 < 0.0 && w1 < 0.0 && w2 < 0.0) {
            crossings += 1;
        }
    }
    crossings % 2 == 1
}

/// Criterion 2: every node of a 17^3 grid over a cube room matches the
/// brute-force distance-plus-parity oracle within 1e-6, and trilinear
/// sampling at the nodes reproduces stored values exactly; under 30 s.
#[test]
fn criterion_02_sdf_oracle() {
    let start = Instant::now();
    let room = unit_cube_room::<f64>(2.0);
    let grid = compute_sdf(&room, [17, 17, 17], 0.3).unwrap();
    let tris: Vec<[Vec3; 3]> = room
        .faces
        .iter()
        .map(|f| [room.vertices[f[0]], room.vertices[f[1]], room.vertices[f[2]]])
        .collect();
    for iz in 0..17 {
        for iy in 0..17 {
            for ix in 0..17 {
                let p = grid.node_position(ix, iy, iz);
                let dist = tris
                    .iter()
                    .map(|t| oracle_point_triangle(p, t))
                    .fold(f64::INFINITY, f64::min);
                let expected = if dist < 1e-7 {
                    dist
                } else if oracle_inside(p, &room) {
                    dist
                } else {
                    -dist
                };
                let stored = grid.node_value(ix, iy, iz);
                assert!(
                    (stored - expected).abs() <= 1e-6,
                    "node ({ix},{iy},{iz}) at {p:?}: stored {stored}, oracle {expected}"
                );
                let (sampled, _, _) = grid.sample(p);
                assert_eq!(sampled, stored, "trilinear at node ({ix},{iy},{iz})");
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "sdf oracle took {elapsed:.1}s (budget 30s)");
    println!("criterion 2 (sdf oracle): PASS ({elapsed:.1}s)");
}

/// Criterion 3: closed-form KL matches a 10^6-sample Monte-Carlo estimate
/// within 2% on 10 random (mu, log_var) pairs.
#[test]
fn criterion_03_kl_monte_carlo() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let dim = 8;
    for pair in 0..10 {
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut g: Graph<f64> = Graph::new();
        let m = g.constant(Tensor::from_vec(mu.clone()));
        let v = g.constant(Tensor::from_vec(lv.clone()));
        let kl_ref = loss_kl(&mut g, m, v).unwrap();
        let closed = g.value(kl_ref).item();

        // MC estimate: E_q[log q(z) - log p(z)] with z ~ q.
        let draws = 1_000_000usize;
        let mut acc = 0.0f64;
        for _ in 0..draws {
            let mut term = 0.0;
            for k in 0..dim {
                let eps: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let sigma = (0.5 * lv[k]).exp();
                let z = mu[k] + sigma * eps;
                let log_q = -0.5 * (lv[k] + eps * eps);
                let log_p = -0.5 * z * z;
                term += log_q - log_p;
            }
            acc += term;
        }
        let mc = acc / draws as f64;
        let rel = (closed - mc).abs() / mc.abs().max(1e-9);
        assert!(
            rel <= 0.02,
            "pair {pair}: closed form {closed} vs MC {mc} (rel {rel:.4})"
        );
    }
    println!("criterion 3 (KL vs Monte-Carlo): PASS");
}

/// Criterion 4: metric bounds on degenerate and well-separated inputs.
#[test]
fn criterion_04_metric_bounds() {
    // Identical bodies: entropy 0, spread 0.
    let one = BodyParams::default();
    let identical: Vec<BodyParams> = (0..100).map(|_| one.clone()).collect();
    let (entropy, size) = diversity_metric(&identical, 20, 11).unwrap();
    assert_eq!(entropy, 0.0);
    assert_eq!(size, 0.0);

    // 20 equal, well-separated clusters: entropy = ln 20.
    let mut separated = Vec::new();
    for c in 0..20 {
        for _ in 0..5 {
            let mut p = BodyParams::default();
            p.translation = [120.0 * c as f64, -60.0 * c as f64, 45.0 * c as f64];
            separated.push(p);
        }
    }
    let (entropy, _) = diversity_metric(&separated, 20, 11).unwrap();
    assert!(
        (entropy - 20f64.ln()).abs() <= 1e-6,
        "entropy {entropy} vs ln 20 {}",
        20f64.ln()
    );

    // Free-floating bodies: non-collision 1.0, contact 0.0.
    let grid = SdfGrid {
        origin: Vec3::new(-5.0, -5.0, -5.0),
        spacing: 5.0,
        dims: [3, 3, 3],
        values: vec![2.0; 27],
    };
    let tri = TriMesh {
        vertices: vec![
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.2, 0.0),
            Vec3::new(0.0, 1.4, 1.0),
        ],
        faces: vec![[0, 1, 2]],
        labels: None,
    };
    let bodies: Vec<TriMesh> = (0..7).map(|_| tri.clone()).collect();
    let m = physical_metric(&bodies, &grid).unwrap();
    assert_eq!(m.non_collision_score, 1.0);
    assert_eq!(m.contact_ratio, 0.0);
    println!("criterion 4 (metric bounds): PASS");
}

/// Criterion 5: refinement over 100 perturbed initializations reaches
/// non-collision >= 0.95 and contact >= 0.90 in aggregate, strictly
/// improving both, in under five minutes.
#[test]
fn criterion_05_fitting_efficacy() {
    let start = Instant::now();
    let template: Arc<BodyTemplate> = Arc::new(build_template(7));
    let weights = LossWeights::default(); // fitting weights {0.1, 0.5, 0.01}
    let fit_cfg = FitConfig::default();
    // Contact set for support-seeking refinement: the feet, as in the
    // module-level fitting example. The wide default set makes every limb a
    // surface attractor, which is the wrong prior when bodies must settle
    // onto supports.
    let fit_parts = [
        inhabit_core::body::PartLabel::FootL,
        inhabit_core::body::PartLabel::FootR,
    ];

    // Two furnished rooms; valid placements perturbed into collision or
    // floating.
    let mut placed: Vec<(usize, BodyParams, Camera)> = Vec::new();
    let mut rooms = Vec::new();
    for room_idx in 0..2usize {
        let spec = inhabit_core::data::make_room_spec(50, room_idx);
        let mesh = inhabit_core::synth::synth_room::<f64>(&spec).unwrap();
        let sdf = Arc::new(compute_sdf(&mesh, [48, 48, 48], 0.3).unwrap());
        let samples = inhabit_core::synth::synth_interactions(
            &spec,
            &mesh,
            &sdf,
            &template,
            "fit-room",
            Split::Train,
            50,
            91 + room_idx as u64,
            &inhabit_core::geom::VirtualCameraConfig::default(),
        )
        .unwrap();
        assert!(samples.len() >= 40, "got {} placements", samples.len());
        let ctx = Arc::new(FitContext::new(
            template.clone(),
            &mesh,
            sdf.clone(),
            &fit_parts,
            0.15,
        ));
        for s in samples.into_iter().take(50) {
            placed.push((room_idx, s.body, s.view.camera));
        }
        rooms.push((ctx, sdf));
    }
    let placed: Vec<_> = placed.into_iter().take(100).collect();
    assert_eq!(placed.len(), 100);

    // Perturb: even indices sink into geometry, odd indices float upward.
    let mut rng = ChaCha12Rng::seed_from_u64(7321);
    let perturbed: Vec<(usize, BodyParams, Camera)> = placed
        .iter()
        .map(|(room, body, cam)| {
            let delta_world = if rng.random_range(0.0..1.0) < 0.5 {
                Vec3::new(0.0, -rng.random_range(0.25..0.4), 0.0)
            } else {
                Vec3::new(0.0, rng.random_range(0.25..0.4), 0.0)
            };
            let delta_cam = cam.world_to_cam().rotation.mul_vec(delta_world);
            let mut b = body.clone();
            b.translation[0] += delta_cam.x;
            b.translation[1] += delta_cam.y;
            b.translation[2] += delta_cam.z;
            (*room, b, cam.clone())
        })
        .collect();

    let metrics_of = |bodies: &[(usize, BodyParams, Camera)]| -> (f64, f64) {
        let mut free = 0usize;
        let mut total = 0usize;
        let mut contact = 0usize;
        for (room, body, cam) in bodies {
            let mesh = body_mesh(body, &template).unwrap().transformed(&cam.cam_to_world);
            let sdf = &rooms[*room].1;
            let mut touching = false;
            for v in &mesh.vertices {
                let (value, _, _) = sdf.sample(*v);
                if value > 0.0 {
                    free += 1;
                } else {
                    touching = true;
                }
                total += 1;
            }
            contact += usize::from(touching);
        }
        (free as f64 / total as f64, contact as f64 / bodies.len() as f64)
    };

    let (pre_ncol, pre_contact) = metrics_of(&perturbed);

    let refined: Vec<(usize, BodyParams, Camera)> = perturbed
        .par_iter()
        .map(|(room, body, cam)| {
            let result = fit_body(&rooms[*room].0, body, &cam.cam_to_world, &weights, &fit_cfg)
                .expect("fit");
            (*room, result.x_h_refined, cam.clone())
        })
        .collect();
    let (post_ncol, post_contact) = metrics_of(&refined);

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        post_ncol >= 0.95,
        "post-fit non-collision {post_ncol:.4} (pre {pre_ncol:.4})"
    );
    assert!(
        post_contact >= 0.90,
        "post-fit contact ratio {post_contact:.4} (pre {pre_contact:.4})"
    );
    assert!(post_ncol > pre_ncol, "non-collision did not improve: {pre_ncol:.4} -> {post_ncol:.4}");
    assert!(post_contact > pre_contact, "contact did not improve: {pre_contact:.4} -> {post_contact:.4}");
    assert!(elapsed < 300.0, "fitting efficacy took {elapsed:.1}s (budget 300s)");
    println!(
        "criterion 5 (fitting efficacy): PASS (non-collision {pre_ncol:.3}->{post_ncol:.3}, contact {pre_contact:.3}->{post_contact:.3}, {elapsed:.0}s)"
    );
}

/// Criterion 6: S1 validation reconstruction error halves by epoch 30 on
/// the 2000-pair dataset, the S1+HS variant switches interaction losses on
/// exactly at the 75% boundary, and the full run stays under 30 minutes.
#[test]
fn criterion_06_training_sanity() {
    let ds = dataset();
    let fixture = trained();
    let first = &fixture.records[0];
    let last = fixture.records.last().unwrap();
    assert_eq!(fixture.records.len(), 30);
    assert!(
        last.val_rec <= 0.5 * first.val_rec,
        "val_rec epoch 30 {:.4} > 50% of epoch 1 {:.4}",
        last.val_rec,
        first.val_rec
    );
    // KL ramp endpoints.
    assert_eq!(first.alpha_kl, 0.0);
    assert!((fixture.records[10].alpha_kl - 0.1).abs() < 1e-12);

    // S1 + HS variant on a subset: interaction losses activate exactly at
    // ceil(0.75 * epochs).
    let data = build_train_data(
        &ds.root,
        ds.template.clone(),
        &category::SUBSET,
        &DEFAULT_CONTACT_PARTS,
        0.15,
    )
    .unwrap();
    let subset = inhabit_core::cvae::TrainData {
        train: data.train.iter().take(200).cloned().collect(),
        val: data.val.iter().take(50).cloned().collect(),
        rooms: data.rooms,
        template: data.template,
        contact_indices: data.contact_indices,
    };
    let mut model = new_model(ModelConfig::s1(category::SUBSET.to_vec()), 2);
    let schedule = TrainSchedule { epochs: 8, use_hs: true, seed: 4, ..Default::default() };
    let hs_records = train(&mut model, &subset, &schedule, &LossWeights::default()).unwrap();
    let boundary = hs_start_epoch(&schedule);
    assert_eq!(boundary, 6);
    for r in &hs_records {
        assert_eq!(
            r.hs_active,
            r.epoch >= boundary,
            "epoch {}: hs_active {}",
            r.epoch,
            r.hs_active
        );
        if r.epoch < boundary {
            assert_eq!(r.train_contact, 0.0);
            assert_eq!(r.train_collision, 0.0);
        } else {
            assert!(r.train_contact > 0.0, "contact loss not recorded after boundary");
        }
    }

    let total = fixture.train_secs + ds.build_secs;
    assert!(total < 1800.0, "dataset+training took {total:.0}s (budget 1800s)");
    println!(
        "criterion 6 (training sanity): PASS (val_rec {:.4} -> {:.4}, {total:.0}s)",
        first.val_rec, last.val_rec
    );
}

/// Criterion 7: 200 samples on the held-out room spread across clusters:
/// entropy > 1.5 nats, at least 10 of 20 clusters occupied.
#[test]
fn criterion_07_generation_non_collapse() {
    let ds = dataset();
    let fixture = trained();
    let (_, view_rel) = test_room_view(0);
    let view = load_view(&ds.root, &view_rel).unwrap();
    let scene = encode_scene(&view, &category::SUBSET);
    let bodies = sample(&fixture.model, &scene, 200, 99).unwrap();
    assert_eq!(bodies.len(), 200);
    let (entropy, _) = diversity_metric(&bodies, 20, 5).unwrap();
    let occupied = occupied_clusters(&bodies, 20, 5).unwrap();
    assert!(entropy > 1.5, "cluster entropy {entropy:.3} <= 1.5");
    assert!(occupied >= 10, "{occupied} occupied clusters < 10");
    println!(
        "criterion 7 (generation non-collapse): PASS (entropy {entropy:.2}, {occupied} clusters)"
    );
}

/// Criterion 8: the scene pose prior equals the independent sample mean to
/// 1e-12, and its regularizer is exact.
#[test]
fn criterion_08_pose_prior() {
    let ds = dataset();
    let fixture = trained();
    let (_, view_rel) = test_room_view(1);
    let view = load_view(&ds.root, &view_rel).unwrap();
    let scene = encode_scene(&view, &category::SUBSET);

    let prior = derive_pose_prior(&fixture.model, &scene, 100, 1234).unwrap();
    let bodies = sample(&fixture.model, &scene, 100, 1234).unwrap();
    for k in 0..32 {
        let mean: f64 = bodies.iter().map(|b| b.theta_b[k]).sum::<f64>() / 100.0;
        assert!(
            (mean - prior[k]).abs() <= 1e-12,
            "dim {k}: independent mean {mean} vs prior {}",
            prior[k]
        );
    }
    assert_eq!(prior_regularizer(&prior, &prior), 0.0);
    let theta: Vec<f64> = (0..32).map(|i| prior[i] + 0.1 * (i as f64 * 0.9).sin()).collect();
    let grad = prior_regularizer_grad(&theta, &prior);
    for k in 0..32 {
        let expect = 2.0 * (theta[k] - prior[k]);
        assert!((grad[k] - expect).abs() <= 1e-10);
    }
    println!("criterion 8 (pose prior): PASS");
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_inhabit"))
        .args(args)
        .status()
        .expect("spawn inhabit");
    assert!(status.success(), "inhabit {args:?} failed");
}

fn run_pipeline(root: &Path) {
    std::fs::create_dir_all(root).unwrap();
    let ds = root.join("ds");
    let set_small: Vec<String> = vec![
        "--set".into(), "sdf.dims=24".into(),
        "--set".into(), "train.epochs=2".into(),
        "--set".into(), "train.batch=8".into(),
        "--set".into(), "eval.k=4".into(),
        "--set".into(), "fit.iters=40".into(),
    ];
    let s: Vec<&str> = set_small.iter().map(|s| s.as_str()).collect();
    let p = |buf: &PathBuf| buf.to_str().unwrap().to_string();
    run_cli(&[&["synth", "--out", &p(&ds), "--rooms", "3", "--samples", "24", "--seed", "5"], s.as_slice()].concat());
    run_cli(&[&["train", "--data", &p(&ds), "--out", &p(&root.join("model.psiw")), "--seed", "5"], s.as_slice()].concat());
    run_cli(&[&["sample", "--model", &p(&root.join("model.psiw")), "--data", &p(&ds), "--n", "8", "--seed", "5", "--out", &p(&root.join("samples.jsonl"))], s.as_slice()].concat());
    run_cli(&[&["fit", "--data", &p(&ds), "--bodies", &p(&root.join("samples.jsonl")), "--out", &p(&root.join("refined.jsonl")), "--trace", &p(&root.join("traces.jsonl"))], s.as_slice()].concat());
    run_cli(&[&["eval", "--data", &p(&ds), "--bodies", &p(&root.join("refined.jsonl")), "--out", &p(&root.join("report.txt")), "--seed", "5"], s.as_slice()].concat());
}

/// Criterion 9: the full pipeline, run twice through the CLI with identical
/// seeds, produces byte-identical sample, fit, and eval artifacts.
#[test]
fn criterion_09_end_to_end_determinism() {
    let base = tmp_root().join("determinism");
    let run1 = base.join("run1");
    let run2 = base.join("run2");
    run_pipeline(&run1);
    run_pipeline(&run2);
    for artifact in ["samples.jsonl", "refined.jsonl", "traces.jsonl", "report.txt"] {
        let a = std::fs::read(run1.join(artifact)).unwrap();
        let b = std::fs::read(run2.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }
    // The dataset itself must agree too for the above to be meaningful.
    let a = std::fs::read(run1.join("ds/samples.jsonl")).unwrap();
    let b = std::fs::read(run2.join("ds/samples.jsonl")).unwrap();
    assert_eq!(a, b, "dataset samples.jsonl differs");
    println!("criterion 9 (end-to-end determinism): PASS");
}

/// Criterion 10: every binary format survives write-read-write bit-exactly
/// and rejects corrupted magic bytes with an error naming the format.
#[test]
fn criterion_10_format_roundtrips() {
    let dir = tmp_root().join("formats");
    std::fs::create_dir_all(&dir).unwrap();

    // SDF grid.
    let room = unit_cube_room::<f64>(1.2);
    let grid = compute_sdf(&room, [9, 9, 9], 0.2).unwrap();
    let sdf_path = dir.join("grid.psdf");
    inhabit_core::geom::write_sdf(&sdf_path, &grid).unwrap();
    let b1 = std::fs::read(&sdf_path).unwrap();
    let back: SdfGrid = inhabit_core::geom::read_sdf(&sdf_path).unwrap();
    inhabit_core::geom::write_sdf(&sdf_path, &back).unwrap();
    assert_eq!(b1, std::fs::read(&sdf_path).unwrap(), "PSDF roundtrip");
    let mut corrupt = b1.clone();
    corrupt[0] ^= 0xFF;
    std::fs::write(&sdf_path, &corrupt).unwrap();
    let err = inhabit_core::geom::read_sdf::<f64>(&sdf_path).unwrap_err().to_string();
    assert!(err.contains("PSDF"), "sdf error names format: {err}");

    // Checkpoint.
    let ckpt_path = dir.join("model.psiw");
    let model = new_model(
        {
            let mut c = ModelConfig::s1(category::SUBSET.to_vec());
            c.hidden = 32;
            c.scene_code = 16;
            c.lift = 16;
            c.conv_channels = vec![2, 2, 4, 4, 4, 8];
            c
        },
        9,
    );
    inhabit_core::cvae::save_model(&ckpt_path, &model).unwrap();
    let b1 = std::fs::read(&ckpt_path).unwrap();
    let back = inhabit_core::cvae::load_model(&ckpt_path).unwrap();
    inhabit_core::cvae::save_model(&ckpt_path, &back).unwrap();
    assert_eq!(b1, std::fs::read(&ckpt_path).unwrap(), "PSIW roundtrip");
    let mut corrupt = b1.clone();
    corrupt[0] ^= 0xFF;
    std::fs::write(&ckpt_path, &corrupt).unwrap();
    let err = inhabit_core::cvae::load_model(&ckpt_path).unwrap_err().to_string();
    assert!(err.contains("PSIW"), "checkpoint error names format: {err}");

    // Template.
    let tpl_path = dir.join("body.psbt");
    let template: BodyTemplate = build_template(3);
    inhabit_core::body::write_template(&tpl_path, &template).unwrap();
    let b1 = std::fs::read(&tpl_path).unwrap();
    let back: BodyTemplate = inhabit_core::body::read_template(&tpl_path).unwrap();
    inhabit_core::body::write_template(&tpl_path, &back).unwrap();
    assert_eq!(b1, std::fs::read(&tpl_path).unwrap(), "PSBT roundtrip");
    let mut corrupt = b1.clone();
    corrupt[0] ^= 0xFF;
    std::fs::write(&tpl_path, &corrupt).unwrap();
    let err = inhabit_core::body::read_template::<f64>(&tpl_path).unwrap_err().to_string();
    assert!(err.contains("PSBT"), "template error names format: {err}");

    // View bundle + dataset records: field-by-field equality after rewrite.
    let ds = dataset();
    let records = read_samples(&ds.root).unwrap();
    assert!(records.len() >= 1000, "dataset has {} records", records.len());
    let copy_dir = tmp_root().join("formats-ds");
    std::fs::create_dir_all(&copy_dir).unwrap();
    inhabit_core::data::write_samples(&copy_dir, &records).unwrap();
    let reread = read_samples(&copy_dir).unwrap();
    assert_eq!(records.len(), reread.len());
    for (a, b) in records.iter().zip(&reread) {
        assert_eq!(a.scene_id, b.scene_id);
        assert_eq!(a.view, b.view);
        assert_eq!(a.split, b.split);
        assert_eq!(a.body, b.body);
    }
    let bytes_a = std::fs::read(ds.root.join("samples.jsonl")).unwrap();
    let bytes_b = std::fs::read(copy_dir.join("samples.jsonl")).unwrap();
    assert_eq!(bytes_a, bytes_b, "samples.jsonl rewrite is byte-identical");

    let view_rel = &records[0].view;
    let view = load_view(&ds.root, view_rel).unwrap();
    let vdir = dir.join("view");
    inhabit_core::geom::write_view_bundle(&vdir, &view).unwrap();
    let d1 = std::fs::read(vdir.join("depth.raw")).unwrap();
    let back = inhabit_core::geom::read_view_bundle::<f64>(&vdir).unwrap();
    inhabit_core::geom::write_view_bundle(&vdir, &back).unwrap();
    assert_eq!(d1, std::fs::read(vdir.join("depth.raw")).unwrap(), "view bundle roundtrip");

    println!("criterion 10 (format roundtrips): PASS");
}

/// Ancillary check from the module contracts: single-pair overfit drives the
/// reconstruction loss under 0.05 within 500 steps for both architectures.
#[test]
fn overfit_single_pair() {
    let mut cfg = ModelConfig::s1(category::SUBSET.to_vec());
    cfg.hidden = 64;
    cfg.scene_code = 64;
    cfg.lift = 64;
    cfg.conv_channels = vec![4, 6, 8, 8, 12, 16];
    let cfg_s2 = {
        let mut c = cfg.clone();
        c.arch = Arch::S2;
        c
    };
    let mut rng = ChaCha12Rng::seed_from_u64(88);
    let scene = Arc::new(SceneTensor {
        data: Tensor::from_fn(&[13, 128, 128], |_| rng.random_range(0.0..1.0)),
        channels: 13,
        content: (128, 128),
        depth_all_zero: false,
    });
    let x: Vec<f64> = {
        let mut x: Vec<f64> = (0..75).map(|_| rng.random_range(-0.4..0.4)).collect();
        x[2] = 3.0;
        x[3] += 1.0;
        x[7] += 1.0;
        x
    };
    let item = inhabit_core::cvae::TrainItem {
        scene,
        x_h: x,
        camera: identity_camera(),
        room: 0,
    };
    for (cfg, label, bound) in [(cfg, "s1", 0.05), (cfg_s2, "s2", 0.05)] {
        let data = inhabit_core::cvae::TrainData {
            train: vec![item.clone()],
            val: vec![item.clone()],
            rooms: Vec::new(),
            template: Arc::new(build_template(7)),
            contact_indices: Arc::new(vec![0]),
        };
        let mut model = new_model(cfg, 5);
        // 500 optimizer steps = 500 epochs of the single-sample dataset.
        let schedule = TrainSchedule {
            epochs: 500,
            batch_size: 1,
            kl_ramp_epochs: 100_000, // keep the KL pressure off for a pure overfit probe
            ..Default::default()
        };
        let records = train(&mut model, &data, &schedule, &LossWeights::default()).unwrap();
        let final_rec = records.last().unwrap().val_rec;
        assert!(final_rec < bound, "{label}: rec after 500 steps {final_rec}");
    }
    println!("overfit check: PASS");
}
