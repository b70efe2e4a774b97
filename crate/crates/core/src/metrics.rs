//! Evaluation: diversity of generated bodies (k-means cluster entropy and
//! spread), physical plausibility against the scene SDF, and the
//! scene-dependent pose prior.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::BodyParams;
use crate::cvae::{sample, CvaeModel, SceneTensor};
use crate::geom::{SdfGrid, TriMesh};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("diversity metric needs at least {k} bodies, got {n}")]
    TooFewBodies { n: usize, k: usize },
    #[error("no bodies to evaluate")]
    NoBodies,
    #[error(transparent)]
    Cvae(#[from] crate::cvae::CvaeError),
}

/// Diversity and physical evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub cluster_entropy: f64,
    pub mean_cluster_size: f64,
    pub non_collision_score: f64,
    pub contact_ratio: f64,
    pub n_bodies: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Structured text: one `key=value` per line, fixed key order.
    pub fn to_text(&self) -> String {
        format!(
            "cluster_entropy={}\nmean_cluster_size={}\nnon_collision_score={}\ncontact_ratio={}\nn_bodies={}\nseed={}\n",
            self.cluster_entropy,
            self.mean_cluster_size,
            self.non_collision_score,
            self.contact_ratio,
            self.n_bodies,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let mut report = EvalReport {
            cluster_entropy: f64::NAN,
            mean_cluster_size: f64::NAN,
            non_collision_score: f64::NAN,
            contact_ratio: f64::NAN,
            n_bodies: 0,
            seed: 0,
        };
        for line in text.lines() {
            let (k, v) = line.split_once('=')?;
            match k.trim() {
                "cluster_entropy" => report.cluster_entropy = v.trim().parse().ok()?,
                "mean_cluster_size" => report.mean_cluster_size = v.trim().parse().ok()?,
                "non_collision_score" => report.non_collision_score = v.trim().parse().ok()?,
                "contact_ratio" => report.contact_ratio = v.trim().parse().ok()?,
                "n_bodies" => report.n_bodies = v.trim().parse().ok()?,
                "seed" => report.seed = v.trim().parse().ok()?,
                _ => return None,
            }
        }
        Some(report)
    }
}

// ---- k-means ----

struct KmeansResult {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha12Rng, max_iters: usize) -> KmeansResult {
    let n = points.len();
    // k-means++ seeding: D^2 sampling.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // Degenerate data: all points coincide with chosen centroids.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = dist_sq(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let dim = points[0].len();
    let mut assignments = vec![0usize; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist_sq(p, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assignments[i] != best.0 {
                assignments[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums[assignments[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
            // Empty clusters keep their previous centroid.
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist_sq(p, &centroids[a]))
        .sum();
    KmeansResult { assignments, centroids, inertia }
}

const KMEANS_RESTARTS: usize = 5;
const KMEANS_MAX_ITERS: usize = 100;

/// Cluster the 75-dim parameter vectors with seeded k-means (k-means++
/// init, best of 5 restarts) and report the cluster-ID entropy (nats) and
/// mean intra-cluster centroid distance.
pub fn diversity_metric(
    bodies: &[BodyParams<f64>],
    k: usize,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if bodies.len() < k {
        return Err(MetricsError::TooFewBodies { n: bodies.len(), k });
    }
    let points: Vec<Vec<f64>> = bodies.iter().map(|b| b.to_flat()).collect();
    let mut best: Option<KmeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let result = kmeans_once(&points, k, &mut rng, KMEANS_MAX_ITERS);
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    let best = best.expect("at least one restart");

    let n = points.len() as f64;
    let mut counts = vec![0usize; k];
    for &a in &best.assignments {
        counts[a] += 1;
    }
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();

    let mut spread_sum = 0.0;
    let mut occupied = 0usize;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let total: f64 = points
            .iter()
            .zip(&best.assignments)
            .filter(|(_, &a)| a == c)
            .map(|(p, _)| dist_sq(p, &best.centroids[c]).sqrt())
            .sum();
        spread_sum += total / counts[c] as f64;
        occupied += 1;
    }
    let mean_cluster_size = spread_sum / occupied as f64;
    Ok((entropy, mean_cluster_size))
}

/// Number of clusters with at least one member under the same clustering
/// procedure as [`diversity_metric`].
pub fn occupied_clusters(bodies: &[BodyParams<f64>], k: usize, seed: u64) -> Result<usize, MetricsError> {
    if bodies.len() < k {
        return Err(MetricsError::TooFewBodies { n: bodies.len(), k });
    }
    let points: Vec<Vec<f64>> = bodies.iter().map(|b| b.to_flat()).collect();
    let mut best: Option<KmeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let result = kmeans_once(&points, k, &mut rng, KMEANS_MAX_ITERS);
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    let assignments = best.expect("restart").assignments;
    let mut seen = vec![false; k];
    for a in assignments {
        seen[a] = true;
    }
    Ok(seen.iter().filter(|&&s| s).count())
}

/// Physical plausibility of world-frame body meshes against the scene SDF:
/// the fraction of vertices in free space, and the fraction of bodies with
/// at least one vertex at non-positive SDF.
pub struct PhysicalMetric {
    pub non_collision_score: f64,
    pub contact_ratio: f64,
    /// Vertices that fell outside the grid and were clamped.
    pub clamped_vertices: usize,
}

pub fn physical_metric(
    bodies_world: &[TriMesh<f64>],
    sdf: &SdfGrid<f64>,
) -> Result<PhysicalMetric, MetricsError> {
    if bodies_world.is_empty() {
        return Err(MetricsError::NoBodies);
    }
    let mut free = 0usize;
    let mut total = 0usize;
    let mut contact_bodies = 0usize;
    let mut clamped_vertices = 0usize;
    for mesh in bodies_world {
        let mut touching = false;
        for &v in &mesh.vertices {
            let (value, _, clamped) = sdf.sample(v);
            if clamped {
                clamped_vertices += 1;
            }
            if value > 0.0 {
                free += 1;
            } else {
                touching = true;
            }
            total += 1;
        }
        if touching {
            contact_bodies += 1;
        }
    }
    Ok(PhysicalMetric {
        non_collision_score: free as f64 / total as f64,
        contact_ratio: contact_bodies as f64 / bodies_world.len() as f64,
        clamped_vertices,
    })
}

/// Scene-dependent pose prior: the mean pose latent over `n` bodies sampled
/// for this scene.
pub fn derive_pose_prior(
    model: &CvaeModel,
    scene: &SceneTensor,
    n: usize,
    seed: u64,
) -> Result<[f64; 32], MetricsError> {
    let bodies = sample(model, scene, n, seed)?;
    let mut mean = [0.0f64; 32];
    for b in &bodies {
        for (m, &t) in mean.iter_mut().zip(&b.theta_b) {
            *m += t;
        }
    }
    if !bodies.is_empty() {
        for m in &mut mean {
            *m /= bodies.len() as f64;
        }
    }
    Ok(mean)
}

/// Weight multiplier recommended when swapping the zero-centered pose
/// regularizer for the scene-dependent one.
pub const PRIOR_WEIGHT_MULTIPLIER: f64 = 1.5;

/// Squared distance of a pose latent from the scene prior.
pub fn prior_regularizer(theta_b: &[f64], theta_b_s: &[f64]) -> f64 {
    assert_eq!(theta_b.len(), 32);
    assert_eq!(theta_b_s.len(), 32);
    theta_b
        .iter()
        .zip(theta_b_s)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Analytic gradient of [`prior_regularizer`] in the pose latent.
pub fn prior_regularizer_grad(theta_b: &[f64], theta_b_s: &[f64]) -> Vec<f64> {
    theta_b
        .iter()
        .zip(theta_b_s)
        .map(|(a, b)| 2.0 * (a - b))
        .collect()
}
