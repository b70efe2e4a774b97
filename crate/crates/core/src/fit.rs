//! Scene geometry-aware refinement: gradient descent on the fitting
//! objective from a generated body, pulling contact parts onto nearby
//! surfaces while pushing vertices out of solid geometry.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{build_body_graph, world_verts_graph, BodyParams, BodyTemplate, PartLabel};
use crate::diff::{adam_step, AdamState, Graph, Tensor};
use crate::geom::{PointGrid, RigidTransform, SdfGrid, TriMesh};
use crate::loss::{loss_fitting, LossWeights};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fitting objective is non-finite at the starting point")]
    NonFiniteStart,
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop when the relative improvement over `tol_window` iterations
    /// drops below this.
    pub rel_tol: f64,
    pub tol_window: usize,
    /// Divergence: loss above `divergence_factor` x initial for
    /// `divergence_patience` consecutive iterations.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    /// Edge length the scene mesh is refined to before vertex-based
    /// contact queries.
    pub refine_edge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.01,
            max_iters: 300,
            rel_tol: 1e-5,
            tol_window: 10,
            divergence_factor: 10.0,
            divergence_patience: 20,
            refine_edge: 0.15,
        }
    }
}

/// Everything fixed across fits in one room.
pub struct FitContext {
    pub template: Arc<BodyTemplate<f64>>,
    pub contact_indices: Arc<Vec<usize>>,
    pub scene_points: Arc<PointGrid<f64>>,
    pub sdf: Arc<SdfGrid<f64>>,
}

impl FitContext {
    /// Refine the scene mesh so its vertex set is dense enough for contact
    /// queries, and index it.
    pub fn new(
        template: Arc<BodyTemplate<f64>>,
        scene: &TriMesh<f64>,
        sdf: Arc<SdfGrid<f64>>,
        contact_parts: &[PartLabel],
        refine_edge: f64,
    ) -> Self {
        let refined = scene.refined(refine_edge);
        let scene_points = Arc::new(PointGrid::build(refined.vertices, refine_edge.max(0.05)));
        let contact_indices = Arc::new(crate::body::contact_vertices(&template, contact_parts));
        FitContext { template, contact_indices, scene_points, sdf }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub l_f: f64,
    pub l_contact: f64,
    pub l_collision: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub x_h_refined: BodyParams<f64>,
    pub loss_trace: Vec<TraceEntry>,
    pub converged: bool,
    pub iterations_used: usize,
}

struct Eval {
    l_f: f64,
    l_contact: f64,
    l_collision: f64,
    grads: Option<Vec<f64>>,
}

fn evaluate(
    ctx: &FitContext,
    x: &[f64],
    x0: &[f64],
    cam_to_world: &RigidTransform<f64>,
    weights: &LossWeights<f64>,
    with_grads: bool,
) -> Result<Eval, FitError> {
    let mut g: Graph<f64> = Graph::new();
    let xh = if with_grads {
        g.param(Tensor::from_vec(x.to_vec()))
    } else {
        g.constant(Tensor::from_vec(x.to_vec()))
    };
    let x0t = g.constant(Tensor::from_vec(x0.to_vec()));
    let body = build_body_graph(&mut g, xh, &ctx.template)?;
    let world = world_verts_graph(&mut g, body.verts_cam, cam_to_world)?;
    let fit = loss_fitting(
        &mut g,
        xh,
        x0t,
        body.theta_b,
        world,
        ctx.contact_indices.clone(),
        ctx.scene_points.clone(),
        ctx.sdf.clone(),
        weights,
    )?;
    let grads = if with_grads {
        let store = g.backward(fit.total)?;
        Some(store.get(xh).expect("parameter gradient").values().to_vec())
    } else {
        None
    };
    Ok(Eval {
        l_f: g.value(fit.total).item(),
        l_contact: g.value(fit.contact).item(),
        l_collision: g.value(fit.collision).item(),
        grads,
    })
}

/// Minimize the fitting objective from `x_h_0` with Adam, re-associating
/// contact nearest neighbors every iteration. Returns the best-seen iterate;
/// the final trace entry is evaluated at exactly that iterate.
pub fn fit_body(
    ctx: &FitContext,
    x_h_0: &BodyParams<f64>,
    cam_to_world: &RigidTransform<f64>,
    weights: &LossWeights<f64>,
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    if !x_h_0.is_finite() {
        return Err(FitError::NonFiniteStart);
    }
    let x0 = x_h_0.to_flat();
    let mut x = x0.clone();
    let mut param = Tensor::from_vec(x.clone());
    let mut adam = AdamState::new(cfg.learning_rate, &[&[75]]);

    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut best_l = f64::INFINITY;
    let mut best_x = x.clone();
    let mut initial_l = None;
    let mut over_budget_streak = 0usize;
    let mut converged = false;
    let mut iterations_used = 0usize;

    for iter in 0..cfg.max_iters {
        let eval = evaluate(ctx, &x, &x0, cam_to_world, weights, true)?;
        if !eval.l_f.is_finite() {
            if iter == 0 {
                return Err(FitError::NonFiniteStart);
            }
            break;
        }
        iterations_used = iter + 1;
        trace.push(TraceEntry {
            iteration: iter,
            l_f: eval.l_f,
            l_contact: eval.l_contact,
            l_collision: eval.l_collision,
        });
        if eval.l_f < best_l {
            best_l = eval.l_f;
            best_x = x.clone();
        }
        let initial = *initial_l.get_or_insert(eval.l_f);
        if eval.l_f > cfg.divergence_factor * initial.max(1e-12) {
            over_budget_streak += 1;
            if over_budget_streak >= cfg.divergence_patience {
                break;
            }
        } else {
            over_budget_streak = 0;
        }
        if iter >= cfg.tol_window {
            let past = trace[iter - cfg.tol_window].l_f;
            let rel = (past - eval.l_f) / past.abs().max(1e-12);
            if rel < cfg.rel_tol {
                converged = true;
                break;
            }
        }

        let grads = vec![Tensor::from_vec(eval.grads.expect("gradient pass"))];
        adam_step(&mut [&mut param], &grads, &["x_h"], &mut adam)?;
        x.copy_from_slice(param.values());
    }

    // Report the returned iterate itself as the last trace entry.
    let final_eval = evaluate(ctx, &best_x, &x0, cam_to_world, weights, false)?;
    trace.push(TraceEntry {
        iteration: iterations_used,
        l_f: final_eval.l_f,
        l_contact: final_eval.l_contact,
        l_collision: final_eval.l_collision,
    });

    Ok(FitResult {
        x_h_refined: BodyParams::from_flat(&best_x)?,
        loss_trace: trace,
        converged,
        iterations_used,
    })
}
