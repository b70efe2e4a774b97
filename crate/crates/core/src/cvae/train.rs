use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{build_body_graph, world_verts_graph, BodyTemplate};
use crate::diff::{adam_step, AdamState, Graph, Tensor, TensorRef};
use crate::geom::{Camera, PointGrid, SdfGrid};
use crate::loss::{
    loss_collision, loss_contact, loss_kl, loss_reconstruction, loss_total, loss_vposer,
    LossWeights,
};

use super::model::{s1_forward, s2_forward, Arch, CvaeModel};
use super::scene::SceneTensor;
use super::CvaeError;

/// Training schedule: epoch count, optimizer learning rate, the linear KL
/// annealing ramp, and the fraction of epochs after which the human-scene
/// interaction terms switch on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub kl_ramp_epochs: usize,
    pub hs_start_fraction: f64,
    pub batch_size: usize,
    pub use_hs: bool,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 30,
            learning_rate: 3e-4,
            kl_ramp_epochs: 10,
            hs_start_fraction: 0.75,
            batch_size: 32,
            use_hs: false,
            seed: 0,
        }
    }
}

/// KL weight at a 1-based epoch: linear ramp from 0 at the first epoch to
/// the full weight after `kl_ramp_epochs`.
pub fn alpha_kl_at(schedule: &TrainSchedule, cap: f64, epoch: usize) -> f64 {
    if schedule.kl_ramp_epochs == 0 {
        return cap;
    }
    let t = (epoch.saturating_sub(1)) as f64 / schedule.kl_ramp_epochs as f64;
    cap * t.min(1.0)
}

/// First 1-based epoch with the human-scene loss enabled:
/// ceil(fraction * epochs).
pub fn hs_start_epoch(schedule: &TrainSchedule) -> usize {
    (schedule.hs_start_fraction * schedule.epochs as f64).ceil() as usize
}

/// One training pair: an encoded view and the camera-frame body feature
/// observed in it.
#[derive(Clone)]
pub struct TrainItem {
    pub scene: Arc<SceneTensor>,
    pub x_h: Vec<f64>,
    pub camera: Camera<f64>,
    pub room: usize,
}

/// Per-room geometry used by the interaction losses.
pub struct RoomContext {
    pub sdf: Arc<SdfGrid<f64>>,
    pub scene_points: Arc<PointGrid<f64>>,
}

pub struct TrainData {
    pub train: Vec<TrainItem>,
    pub val: Vec<TrainItem>,
    pub rooms: Vec<RoomContext>,
    pub template: Arc<BodyTemplate<f64>>,
    pub contact_indices: Arc<Vec<usize>>,
}

/// Per-epoch metrics, written one JSON record per line by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rec: f64,
    pub val_rec: f64,
    pub train_kl: f64,
    pub val_kl: f64,
    /// val_rec + val_kl.
    pub neg_elbo: f64,
    pub alpha_kl: f64,
    pub hs_active: bool,
    pub train_contact: f64,
    pub train_collision: f64,
}

struct SampleOutput {
    rec: f64,
    kl: f64,
    contact: f64,
    collision: f64,
    grads: Option<Vec<Tensor<f64>>>,
}

#[allow(clippy::too_many_arguments)]
fn run_sample(
    model: &CvaeModel,
    data: &TrainData,
    item: &TrainItem,
    eps: &[f64],
    alpha_kl: f64,
    hs: bool,
    weights: &LossWeights<f64>,
    with_grads: bool,
) -> Result<SampleOutput, CvaeError> {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::from_vec(item.x_h.clone()));
    let latent = model.config.latent;
    let (x_rec, kl_ref, param_refs): (TensorRef, TensorRef, Vec<TensorRef>) =
        match model.config.arch {
            Arch::S1 => {
                let fwd = s1_forward(&mut g, model, &item.scene, x, &eps[..latent], with_grads)?;
                let kl = loss_kl(&mut g, fwd.mu, fwd.log_var)?;
                (fwd.x_rec, kl, fwd.param_refs)
            }
            Arch::S2 => {
                let gl = model.config.global_latent;
                let fwd = s2_forward(
                    &mut g,
                    model,
                    &item.scene,
                    x,
                    &eps[..gl],
                    &eps[gl..gl + latent],
                    with_grads,
                )?;
                let kl_g = loss_kl(&mut g, fwd.mu_g, fwd.log_var_g)?;
                let kl_l = loss_kl(&mut g, fwd.mu_l, fwd.log_var_l)?;
                let kl = g.add(kl_g, kl_l)?;
                (fwd.x_rec, kl, fwd.param_refs)
            }
        };

    let rec = loss_reconstruction(&mut g, x, x_rec, &item.camera)?;
    let theta_rec = g.slice(x_rec, 0, 19, 32)?;
    let vposer = loss_vposer(&mut g, theta_rec);

    let (contact, collision) = if hs {
        let room = &data.rooms[item.room];
        let body = build_body_graph(&mut g, x_rec, &data.template)?;
        let world = world_verts_graph(&mut g, body.verts_cam, &item.camera.cam_to_world)?;
        let contact = loss_contact(
            &mut g,
            world,
            data.contact_indices.clone(),
            room.scene_points.clone(),
            weights.geman_sigma,
        )?;
        let collision = loss_collision(&mut g, world, room.sdf.clone())?;
        (Some(contact), Some(collision))
    } else {
        (None, None)
    };

    let total = loss_total(&mut g, rec, kl_ref, vposer, contact, collision, weights, alpha_kl, hs)?;
    let total_val = g.value(total).item();
    if !total_val.is_finite() {
        return Err(CvaeError::Diverged { epoch: 0, reason: "non-finite loss".to_string() });
    }

    let grads = if with_grads {
        let store = g.backward(total)?;
        Some(
            param_refs
                .iter()
                .map(|r| store.get(*r).expect("parameter gradient").clone())
                .collect(),
        )
    } else {
        None
    };
    Ok(SampleOutput {
        rec: g.value(rec).item(),
        kl: g.value(kl_ref).item(),
        contact: contact.map_or(0.0, |c| g.value(c).item()),
        collision: collision.map_or(0.0, |c| g.value(c).item()),
        grads,
    })
}

fn epoch_noise(model: &CvaeModel, schedule: &TrainSchedule, epoch: usize, n: usize) -> Vec<Vec<f64>> {
    let dim = match model.config.arch {
        Arch::S1 => model.config.latent,
        Arch::S2 => model.config.global_latent + model.config.latent,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(
        schedule.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Train in place. Adam at the schedule's learning rate, KL weight annealed
/// linearly, interaction losses switched on at the 75% boundary when
/// `use_hs` is set. On divergence the model is restored to the last
/// completed epoch and an error is returned.
pub fn train(
    model: &mut CvaeModel,
    data: &TrainData,
    schedule: &TrainSchedule,
    weights: &LossWeights<f64>,
) -> Result<Vec<EpochRecord>, CvaeError> {
    if data.train.is_empty() {
        return Err(CvaeError::EmptyDataset);
    }
    let names: Vec<String> = model.param_names();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let shapes: Vec<Vec<usize>> = {
        let mut v = Vec::new();
        model.for_each(&mut |_, t| v.push(t.shape().to_vec()));
        v
    };
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(schedule.learning_rate, &shape_refs);

    let mut records = Vec::with_capacity(schedule.epochs);
    let mut snapshot = model.clone();
    let hs_from = hs_start_epoch(schedule);
    let chunk = (2 * rayon::current_num_threads()).max(2);

    for epoch in 1..=schedule.epochs {
        let alpha_kl = alpha_kl_at(schedule, weights.alpha_kl, epoch);
        let hs = schedule.use_hs && epoch >= hs_from;

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(
            schedule.seed ^ 0xA5A5_5A5A ^ (epoch as u64).wrapping_mul(0x00FF_00FF_0F0F_F0F0),
        );
        order.shuffle(&mut shuffle_rng);
        let noise = epoch_noise(model, schedule, epoch, data.train.len());

        let mut epoch_rec = Vec::new();
        let mut epoch_kl = Vec::new();
        let mut epoch_contact = Vec::new();
        let mut epoch_collision = Vec::new();

        for batch in order.chunks(schedule.batch_size) {
            let inv_b = 1.0 / batch.len() as f64;
            let mut acc: Option<Vec<Tensor<f64>>> = None;
            for chunk_ids in batch.chunks(chunk) {
                let results: Result<Vec<SampleOutput>, CvaeError> = chunk_ids
                    .par_iter()
                    .map(|&i| {
                        run_sample(
                            model,
                            data,
                            &data.train[i],
                            &noise[i],
                            alpha_kl,
                            hs,
                            weights,
                            true,
                        )
                    })
                    .collect();
                let results = match results {
                    Ok(r) => r,
                    Err(e) => {
                        *model = snapshot;
                        return Err(CvaeError::Diverged { epoch, reason: e.to_string() });
                    }
                };
                for out in results {
                    epoch_rec.push(out.rec);
                    epoch_kl.push(out.kl);
                    if hs {
                        epoch_contact.push(out.contact);
                        epoch_collision.push(out.collision);
                    }
                    let grads = out.grads.expect("training pass computes gradients");
                    match acc.as_mut() {
                        None => {
                            let mut scaled = grads;
                            for t in &mut scaled {
                                for v in t.values_mut() {
                                    *v *= inv_b;
                                }
                            }
                            acc = Some(scaled);
                        }
                        Some(acc) => {
                            for (a, gt) in acc.iter_mut().zip(&grads) {
                                for (av, gv) in a.values_mut().iter_mut().zip(gt.values()) {
                                    *av += gv * inv_b;
                                }
                            }
                        }
                    }
                }
            }
            let grads = acc.expect("non-empty batch");
            let mut params = model.params_mut();
            let mut tensor_refs: Vec<&mut Tensor<f64>> =
                params.iter_mut().map(|(_, t)| &mut **t).collect();
            if let Err(e) = adam_step(&mut tensor_refs, &grads, &name_refs, &mut adam) {
                drop(tensor_refs);
                drop(params);
                *model = snapshot;
                return Err(CvaeError::Diverged { epoch, reason: e.to_string() });
            }
        }

        // Validation at the posterior mean (epsilon = 0).
        let zero_eps = vec![0.0f64; model.config.global_latent + model.config.latent];
        let val: Result<Vec<SampleOutput>, CvaeError> = data
            .val
            .par_iter()
            .map(|item| run_sample(model, data, item, &zero_eps, alpha_kl, false, weights, false))
            .collect();
        let val = match val {
            Ok(v) => v,
            Err(e) => {
                *model = snapshot;
                return Err(CvaeError::Diverged { epoch, reason: e.to_string() });
            }
        };
        let val_rec = mean(&val.iter().map(|o| o.rec).collect::<Vec<_>>());
        let val_kl = mean(&val.iter().map(|o| o.kl).collect::<Vec<_>>());

        records.push(EpochRecord {
            epoch,
            train_rec: mean(&epoch_rec),
            val_rec,
            train_kl: mean(&epoch_kl),
            val_kl,
            neg_elbo: val_rec + val_kl,
            alpha_kl,
            hs_active: hs,
            train_contact: mean(&epoch_contact),
            train_collision: mean(&epoch_collision),
        });
        snapshot = model.clone();
    }
    Ok(records)
}
