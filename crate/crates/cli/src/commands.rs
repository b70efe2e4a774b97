use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;

use inhabit_core::body::{
    body_mesh, build_template, read_template, write_template, PartLabel,
};
use inhabit_core::config::RunConfig;
use inhabit_core::cvae::{
    encode_scene, latent_traverse, load_model, new_model, sample as cvae_sample, save_model, train as cvae_train,
    Arch, ModelConfig,
};
use inhabit_core::data::{
    build_train_data, generate_dataset, load_room_mesh, load_room_sdf, load_view, read_samples,
    Split,
};
use inhabit_core::fit::{fit_body, FitContext, FitResult};
use inhabit_core::geom::{
    compute_sdf, generate_virtual_cameras, rasterize, read_mesh, write_ply_colored, write_sdf,
    write_view_bundle, Vec3,
};
use inhabit_core::metrics::{
    derive_pose_prior, diversity_metric, physical_metric, EvalReport, PRIOR_WEIGHT_MULTIPLIER,
};
use inhabit_core::synth::category;
use inhabit_core::{BodyTemplate, TriMesh};

use crate::records::{read_records, write_records, BodyRecord};
use crate::OUT_ENV;

fn out_root(explicit: Option<&Path>) -> anyhow::Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    if let Ok(root) = std::env::var(OUT_ENV) {
        return Ok(PathBuf::from(root).join("dataset"));
    }
    bail!("no output path: pass --out or set {OUT_ENV}");
}

fn dataset_template(data: &Path) -> anyhow::Result<Arc<BodyTemplate>> {
    let path = data.join("template.psbt");
    let template = read_template(&path)
        .with_context(|| format!("loading body template {}", path.display()))?;
    Ok(Arc::new(template))
}

pub fn template(config: &RunConfig, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let seed = seed.unwrap_or(config.template_seed);
    let t: BodyTemplate = build_template(seed);
    t.validate()?;
    write_template(out, &t)?;
    println!(
        "template: {} vertices, {} faces, seed {} -> {}",
        t.vertex_count(),
        t.faces.len(),
        seed,
        out.display()
    );
    Ok(())
}

pub fn synth(
    config: &RunConfig,
    out: Option<&Path>,
    rooms: Option<usize>,
    samples: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let root = out_root(out)?;
    let mut dataset_cfg = config.dataset_config();
    if let Some(r) = rooms {
        dataset_cfg.rooms = r;
    }
    if let Some(s) = samples {
        dataset_cfg.samples = s;
    }
    if let Some(s) = seed {
        dataset_cfg.seed = s;
    }
    let template: BodyTemplate = build_template(config.template_seed);
    let start = Instant::now();
    let summary = generate_dataset(&root, &dataset_cfg, &template)?;
    std::fs::create_dir_all(&root)?;
    write_template(&root.join("template.psbt"), &template)?;
    println!(
        "dataset: {} rooms, {} train / {} val / {} test samples ({} requested) in {:.1}s -> {}",
        summary.rooms,
        summary.train,
        summary.val,
        summary.test,
        summary.requested,
        start.elapsed().as_secs_f64(),
        root.display()
    );
    let produced = summary.train + summary.val + summary.test;
    if produced < summary.requested {
        eprintln!(
            "warning: produced {produced} of {} requested samples (placement or camera exhaustion)",
            summary.requested
        );
    }
    Ok(())
}

pub fn sdf(
    config: &RunConfig,
    mesh: &Path,
    out: &Path,
    dims: Option<usize>,
    padding: Option<f64>,
) -> anyhow::Result<()> {
    let m: TriMesh = read_mesh(mesh)?;
    let d = dims.unwrap_or(config.sdf_dims);
    let p = padding.unwrap_or(config.sdf_padding);
    let grid = compute_sdf(&m, [d, d, d], p)?;
    write_sdf(out, &grid)?;
    println!(
        "sdf: {}^3 nodes, spacing {:.4} m -> {}",
        d,
        grid.spacing,
        out.display()
    );
    Ok(())
}

pub fn views(
    config: &RunConfig,
    mesh: &Path,
    out: &Path,
    center: &str,
    count: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let m: TriMesh = read_mesh(mesh)?;
    let parts: Vec<f64> = center
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("--center expects x,y,z")?;
    if parts.len() != 3 {
        bail!("--center expects exactly three coordinates");
    }
    let body_center = Vec3::new(parts[0], parts[1], parts[2]);
    let cams = generate_virtual_cameras(
        &m,
        body_center,
        count.unwrap_or(config.cam_count),
        seed.unwrap_or(config.seed),
        &config.camera_config(),
    )?;
    for (k, cam) in cams.iter().enumerate() {
        let view = rasterize(&m, cam);
        write_view_bundle(&out.join(k.to_string()), &view)?;
    }
    println!("views: {} cameras -> {}", cams.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &RunConfig,
    data: &Path,
    out: &Path,
    log: Option<&Path>,
    arch: Option<&str>,
    hs: bool,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let template = dataset_template(data)?;
    let contact_parts = config.parse_contact_parts()?;
    let train_data = build_train_data(
        data,
        template,
        &category::SUBSET,
        &contact_parts,
        config.refine_edge,
    )?;
    println!(
        "dataset: {} train / {} val items, {} rooms",
        train_data.train.len(),
        train_data.val.len(),
        train_data.rooms.len()
    );

    let arch = match arch.unwrap_or(config.arch.as_str()) {
        "s1" => Arch::S1,
        "s2" => Arch::S2,
        other => bail!("unknown architecture '{other}' (expected s1 or s2)"),
    };
    let model_cfg = match arch {
        Arch::S1 => ModelConfig::s1(category::SUBSET.to_vec()),
        Arch::S2 => ModelConfig::s2(category::SUBSET.to_vec()),
    };
    let mut model = new_model(model_cfg, config.model_seed);
    let mut schedule = config.train_schedule();
    schedule.use_hs = hs || config.use_hs;
    if let Some(e) = epochs {
        schedule.epochs = e;
    }
    if let Some(s) = seed {
        schedule.seed = s;
    }
    let weights = config.loss_weights();

    let start = Instant::now();
    let records = cvae_train(&mut model, &train_data, &schedule, &weights)?;
    for r in &records {
        println!(
            "epoch {:>3}: train_rec {:.4} val_rec {:.4} train_kl {:.3} val_kl {:.3} -elbo {:.4} a_kl {:.3} hs {}",
            r.epoch, r.train_rec, r.val_rec, r.train_kl, r.val_kl, r.neg_elbo, r.alpha_kl, r.hs_active
        );
    }
    save_model(out, &model)?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("log.jsonl"));
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;
    println!(
        "trained {} epochs in {:.1}s -> {} (log {})",
        records.len(),
        start.elapsed().as_secs_f64(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn default_view(data: &Path) -> anyhow::Result<(String, String)> {
    let samples = read_samples(data)?;
    let test = samples
        .iter()
        .find(|r| r.split == Split::Test)
        .or(samples.first())
        .context("dataset has no samples")?;
    Ok((test.scene_id.clone(), test.view.clone()))
}

fn scene_id_of_view(view: &str) -> anyhow::Result<String> {
    // rooms/<id>/views/<k>
    let mut parts = view.split('/');
    match (parts.next(), parts.next()) {
        (Some("rooms"), Some(id)) => Ok(id.to_string()),
        _ => bail!("view path '{view}' is not rooms/<id>/views/<k>"),
    }
}

pub fn sample(
    config: &RunConfig,
    model_path: &Path,
    data: &Path,
    view: Option<&str>,
    n: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<()> {
    let model = load_model(model_path)?;
    let (scene_id, view_rel) = match view {
        Some(v) => (scene_id_of_view(v)?, v.to_string()),
        None => default_view(data)?,
    };
    let scene_view = load_view(data, &view_rel)?;
    let scene = encode_scene(&scene_view, &model.config.categories);
    if scene.depth_all_zero {
        eprintln!("warning: view {view_rel} has an all-zero depth map");
    }
    let n = n.unwrap_or(config.sample_n);
    let seed = seed.unwrap_or(config.seed);
    let bodies = cvae_sample(&model, &scene, n, seed)?;
    let records: Vec<BodyRecord> = bodies
        .iter()
        .map(|b| BodyRecord {
            scene_id: scene_id.clone(),
            view: view_rel.clone(),
            body: b.to_flat(),
        })
        .collect();
    write_records(out, &records)?;
    println!("sampled {} bodies on view {} -> {}", records.len(), view_rel, out.display());
    Ok(())
}

pub fn fit(
    config: &RunConfig,
    data: &Path,
    bodies: &Path,
    out: &Path,
    trace: Option<&Path>,
    iters: Option<usize>,
) -> anyhow::Result<()> {
    let records = read_records(bodies)?;
    if records.is_empty() {
        bail!("no bodies in {}", bodies.display());
    }
    let template = dataset_template(data)?;
    let contact_parts = config.parse_contact_parts()?;
    let mut fit_cfg = config.fit_config();
    if let Some(i) = iters {
        fit_cfg.max_iters = i;
    }
    let weights = config.loss_weights();

    // Group records by room so each context is built once.
    let mut room_ids: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    room_ids.sort();
    room_ids.dedup();
    let mut contexts = std::collections::BTreeMap::new();
    for id in &room_ids {
        let mesh = load_room_mesh(data, id)?;
        let sdf = Arc::new(load_room_sdf(data, id)?);
        contexts.insert(
            id.clone(),
            Arc::new(FitContext::new(
                template.clone(),
                &mesh,
                sdf,
                &contact_parts,
                fit_cfg.refine_edge,
            )),
        );
    }

    let start = Instant::now();
    let results: anyhow::Result<Vec<(BodyRecord, FitResult)>> = records
        .par_iter()
        .map(|record| {
            let ctx = contexts.get(&record.scene_id).expect("context built per room");
            let params = record.params()?;
            let view = load_view(data, &record.view)?;
            let result = fit_body(ctx, &params, &view.camera.cam_to_world, &weights, &fit_cfg)?;
            let refined = BodyRecord {
                scene_id: record.scene_id.clone(),
                view: record.view.clone(),
                body: result.x_h_refined.to_flat(),
            };
            Ok((refined, result))
        })
        .collect();
    let results = results?;

    let refined: Vec<BodyRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    write_records(out, &refined)?;
    if let Some(trace_path) = trace {
        let mut text = String::new();
        for (i, (_, result)) in results.iter().enumerate() {
            for entry in &result.loss_trace {
                let line = serde_json::json!({
                    "body": i,
                    "iteration": entry.iteration,
                    "l_f": entry.l_f,
                    "l_contact": entry.l_contact,
                    "l_collision": entry.l_collision,
                    "converged": result.converged,
                });
                text.push_str(&line.to_string());
                text.push('\n');
            }
        }
        std::fs::write(trace_path, text)?;
    }
    let converged = results.iter().filter(|(_, r)| r.converged).count();
    println!(
        "refined {} bodies ({} converged) in {:.1}s -> {}",
        refined.len(),
        converged,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub fn eval(
    config: &RunConfig,
    data: &Path,
    bodies: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let records = read_records(bodies)?;
    if records.is_empty() {
        bail!("no bodies in {}", bodies.display());
    }
    let template = dataset_template(data)?;
    let seed = seed.unwrap_or(config.seed);

    let params: anyhow::Result<Vec<_>> = records.iter().map(|r| r.params()).collect();
    let params = params?;
    let (entropy, mean_size) = diversity_metric(&params, config.kmeans_k, seed)?;

    // Physical metric per room, aggregated over all bodies.
    let mut room_ids: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    room_ids.sort();
    room_ids.dedup();
    let mut free = 0.0;
    let mut total = 0.0;
    let mut contact_bodies = 0.0;
    for id in &room_ids {
        let sdf = load_room_sdf(data, id)?;
        let meshes: anyhow::Result<Vec<TriMesh>> = records
            .iter()
            .filter(|r| &r.scene_id == id)
            .map(|r| {
                let view = load_view(data, &r.view)?;
                let mesh = body_mesh(&r.params()?, &template)?;
                Ok(mesh.transformed(&view.camera.cam_to_world))
            })
            .collect();
        let meshes = meshes?;
        let m = physical_metric(&meshes, &sdf)?;
        let verts: usize = meshes.iter().map(|b| b.vertices.len()).sum();
        free += m.non_collision_score * verts as f64;
        total += verts as f64;
        contact_bodies += m.contact_ratio * meshes.len() as f64;
    }
    let report = EvalReport {
        cluster_entropy: entropy,
        mean_cluster_size: mean_size,
        non_collision_score: free / total,
        contact_ratio: contact_bodies / records.len() as f64,
        n_bodies: records.len(),
        seed,
    };

    println!("metric                 value");
    println!("---------------------  --------");
    println!("cluster ID entropy     {:8.4}", report.cluster_entropy);
    println!("cluster size average   {:8.4}", report.mean_cluster_size);
    println!("non-collision score    {:8.4}", report.non_collision_score);
    println!("contact ratio          {:8.4}", report.contact_ratio);
    println!("bodies                 {:8}", report.n_bodies);
    if let Some(path) = out {
        std::fs::write(path, report.to_text())?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

pub fn prior(
    config: &RunConfig,
    model_path: &Path,
    data: &Path,
    view: Option<&str>,
    n: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<()> {
    let model = load_model(model_path)?;
    let (_, view_rel) = match view {
        Some(v) => (scene_id_of_view(v)?, v.to_string()),
        None => default_view(data)?,
    };
    let scene_view = load_view(data, &view_rel)?;
    let scene = encode_scene(&scene_view, &model.config.categories);
    let theta = derive_pose_prior(&model, &scene, n.unwrap_or(100), seed.unwrap_or(config.seed))?;
    let payload = serde_json::json!({
        "theta_b_s": theta.to_vec(),
        "weight_multiplier": PRIOR_WEIGHT_MULTIPLIER,
        "view": view_rel,
    });
    std::fs::write(out, format!("{payload}\n"))?;
    println!("pose prior from {} samples -> {}", n.unwrap_or(100), out.display());
    Ok(())
}

pub fn traverse(
    config: &RunConfig,
    model_path: &Path,
    data: &Path,
    view: Option<&str>,
    dims: &str,
    steps: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let model = load_model(model_path)?;
    let (scene_id, view_rel) = match view {
        Some(v) => (scene_id_of_view(v)?, v.to_string()),
        None => default_view(data)?,
    };
    let scene_view = load_view(data, &view_rel)?;
    let scene = encode_scene(&scene_view, &model.config.categories);
    let dims: Vec<usize> = dims
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .context("--dims expects comma-separated indices")?;
    let bodies = latent_traverse(
        &model,
        &scene,
        &dims,
        (config.traverse_lo, config.traverse_hi),
        steps.unwrap_or(config.traverse_steps),
    )?;
    let records: Vec<BodyRecord> = bodies
        .iter()
        .map(|b| BodyRecord {
            scene_id: scene_id.clone(),
            view: view_rel.clone(),
            body: b.to_flat(),
        })
        .collect();
    write_records(out, &records)?;
    println!("traversed dims {:?} in {} steps -> {}", dims, records.len(), out.display());
    Ok(())
}

/// Distinct colors for the 16 body parts.
fn part_color(label: PartLabel) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 16] = [
        [230, 80, 80],
        [240, 160, 90],
        [200, 120, 60],
        [150, 90, 200],
        [90, 170, 230],
        [70, 130, 200],
        [100, 210, 150],
        [60, 170, 120],
        [230, 210, 90],
        [200, 180, 60],
        [220, 110, 180],
        [180, 80, 150],
        [140, 200, 220],
        [110, 170, 190],
        [250, 130, 110],
        [210, 100, 90],
    ];
    PALETTE[label as usize]
}

/// Color for a Matterport category id.
fn semantic_color(id: u8) -> [u8; 3] {
    match id {
        category::WALL => [200, 200, 200],
        category::FLOOR => [150, 150, 150],
        category::CEILING => [230, 230, 230],
        category::BED => [100, 140, 230],
        category::SOFA => [230, 150, 80],
        category::CHAIR => [120, 200, 120],
        category::TABLE => [190, 160, 110],
        category::DESK => [170, 130, 90],
        category::CABINET => [150, 110, 170],
        category::DOOR => [160, 120, 80],
        category::WINDOW => [140, 210, 230],
        _ => [120, 120, 120],
    }
}

pub fn export(_config: &RunConfig, data: &Path, bodies: &Path, out: &Path) -> anyhow::Result<()> {
    let records = read_records(bodies)?;
    if records.is_empty() {
        bail!("no bodies in {}", bodies.display());
    }
    std::fs::create_dir_all(out)?;
    let template = dataset_template(data)?;
    let body_colors: Vec<[u8; 3]> = template.part_labels.iter().map(|&l| part_color(l)).collect();

    let mut room_ids: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    room_ids.sort();
    room_ids.dedup();
    for id in &room_ids {
        let mesh = load_room_mesh(data, id)?;
        let colors: Vec<[u8; 3]> = mesh
            .labels
            .as_ref()
            .map(|ls| ls.iter().map(|&l| semantic_color(l)).collect())
            .unwrap_or_else(|| vec![[128, 128, 128]; mesh.vertices.len()]);
        write_ply_colored(&out.join(format!("scene_{id}.ply")), &mesh, &colors)?;
    }
    for (i, record) in records.iter().enumerate() {
        let view = load_view(data, &record.view)?;
        let mesh = body_mesh(&record.params()?, &template)?.transformed(&view.camera.cam_to_world);
        write_ply_colored(&out.join(format!("body_{i:03}.ply")), &mesh, &body_colors)?;
    }
    println!("exported {} bodies and {} scenes -> {}", records.len(), room_ids.len(), out.display());
    Ok(())
}
