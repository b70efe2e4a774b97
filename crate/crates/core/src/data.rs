//! Dataset directory handling: rooms (mesh + SDF), view bundles, and the
//! samples.jsonl index, plus the end-to-end dataset generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{contact_vertices, BodyParams, BodyTemplate, PartLabel};
use crate::cvae::{encode_scene, RoomContext, SceneTensor, TrainData, TrainItem};
use crate::geom::{
    compute_sdf, read_ply, read_sdf, read_view_bundle, write_ply, write_sdf, write_view_bundle,
    PointGrid, SceneView, SdfGrid, TriMesh, VirtualCameraConfig,
};
use crate::synth::{category, synth_interactions, synth_room, Facing, Furniture, RoomSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("samples.jsonl line {line}: {detail}")]
    BadRecord { line: usize, detail: String },
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
    #[error("dataset at {0} has no rooms")]
    NoRooms(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Train / validation / test tag; splits are disjoint by scene id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One line of samples.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene_id: String,
    /// View-bundle directory relative to the dataset root.
    pub view: String,
    /// The 75 body features, camera frame.
    pub body: Vec<f64>,
    pub split: Split,
}

pub fn room_dir(root: &Path, id: &str) -> PathBuf {
    root.join("rooms").join(id)
}

pub fn write_room(root: &Path, id: &str, mesh: &TriMesh<f64>, sdf: &SdfGrid<f64>) -> Result<(), DataError> {
    let dir = room_dir(root, id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_ply(&dir.join("mesh.ply"), mesh)?;
    write_sdf(&dir.join("sdf.psdf"), sdf)?;
    Ok(())
}

pub fn load_room_mesh(root: &Path, id: &str) -> Result<TriMesh<f64>, DataError> {
    Ok(read_ply(&room_dir(root, id).join("mesh.ply"))?)
}

pub fn load_room_sdf(root: &Path, id: &str) -> Result<SdfGrid<f64>, DataError> {
    Ok(read_sdf(&room_dir(root, id).join("sdf.psdf"))?)
}

/// Write a view bundle under its room, returning the root-relative path.
pub fn write_view(root: &Path, id: &str, index: usize, view: &SceneView<f64>) -> Result<String, DataError> {
    let rel = format!("rooms/{id}/views/{index}");
    write_view_bundle(&root.join(&rel), view)?;
    Ok(rel)
}

pub fn load_view(root: &Path, rel: &str) -> Result<SceneView<f64>, DataError> {
    Ok(read_view_bundle(&root.join(rel))?)
}

pub fn write_samples(root: &Path, records: &[SampleRecord]) -> Result<(), DataError> {
    let path = root.join("samples.jsonl");
    let mut file = fs::File::create(&path).map_err(io_err(&path))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| DataError::BadRecord { line: 0, detail: e.to_string() })?;
        writeln!(file, "{line}").map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_samples(root: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let path = root.join("samples.jsonl");
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::BadRecord { line: i + 1, detail: e.to_string() })?;
        if rec.body.len() != 75 {
            return Err(DataError::BadRecord {
                line: i + 1,
                detail: format!("body has {} values, expected 75", rec.body.len()),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn room_ids(root: &Path) -> Result<Vec<String>, DataError> {
    let dir = root.join("rooms");
    let mut ids = Vec::new();
    let entries = fs::read_dir(&dir).map_err(io_err(&dir))?;
    for e in entries {
        let e = e.map_err(io_err(&dir))?;
        if e.path().is_dir() {
            ids.push(e.file_name().to_string_lossy().to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(DataError::NoRooms(root.to_path_buf()));
    }
    Ok(ids)
}

// ---- dataset generation ----

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub rooms: usize,
    pub samples: usize,
    pub seed: u64,
    pub sdf_dims: [usize; 3],
    pub sdf_padding: f64,
    pub camera: VirtualCameraConfig<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            rooms: 8,
            samples: 2000,
            seed: 0,
            sdf_dims: [48, 48, 48],
            sdf_padding: 0.3,
            camera: VirtualCameraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub rooms: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub requested: usize,
}

/// Seeded room layout: sizes and furniture drawn per room index, overlap-free
/// by rejection.
pub fn make_room_spec(seed: u64, index: usize) -> RoomSpec {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0xD134_2543_DE82_EF95));
    let width = rng.random_range(3.8..5.2);
    let depth = rng.random_range(3.4..4.6);
    let height = rng.random_range(2.5..2.8);
    let mut spec = RoomSpec { width, depth, height, furniture: Vec::new(), seed: seed ^ index as u64 };

    // (category, footprint w x d, height) candidates; one bed max.
    let catalog: [(u8, f64, f64, f64); 6] = [
        (category::BED, 1.9, 1.45, 0.55),
        (category::SOFA, 1.8, 0.85, 0.45),
        (category::CHAIR, 0.55, 0.55, 0.45),
        (category::TABLE, 1.2, 0.8, 0.72),
        (category::DESK, 1.3, 0.7, 0.74),
        (category::CABINET, 0.9, 0.45, 1.5),
    ];
    let n_pieces = rng.random_range(3..=5);
    let mut has_bed = false;
    let mut placed = 0usize;
    let mut tries = 0usize;
    while placed < n_pieces && tries < 80 {
        tries += 1;
        let (cat, fw, fd, fh) = catalog[rng.random_range(0..catalog.len())];
        if cat == category::BED && has_bed {
            continue;
        }
        // Swap footprint orientation half the time.
        let (fw, fd) = if rng.random_range(0.0..1.0) < 0.5 { (fw, fd) } else { (fd, fw) };
        if fw + 0.6 >= width || fd + 0.6 >= depth {
            continue;
        }
        let x0 = rng.random_range(0.25..width - fw - 0.25);
        let z0 = rng.random_range(0.25..depth - fd - 0.25);
        let candidate = Furniture {
            category: cat,
            min: [x0, 0.0, z0],
            max: [x0 + fw, fh, z0 + fd],
            facing: match rng.random_range(0..4) {
                0 => Facing::PosX,
                1 => Facing::NegX,
                2 => Facing::PosZ,
                _ => Facing::NegZ,
            },
        };
        const WALKWAY: f64 = 0.35;
        let clear = spec.furniture.iter().all(|f| {
            candidate.min[0] > f.max[0] + WALKWAY
                || candidate.max[0] < f.min[0] - WALKWAY
                || candidate.min[2] > f.max[2] + WALKWAY
                || candidate.max[2] < f.min[2] - WALKWAY
        });
        if clear {
            has_bed |= cat == category::BED;
            spec.furniture.push(candidate);
            placed += 1;
        }
    }
    // Guarantee a sittable support: scan for the first clear sofa spot.
    if spec.furniture.iter().all(|f| {
        !matches!(f.category, category::BED | category::SOFA | category::CHAIR)
    }) {
        let (fw, fd) = (1.7, 0.8);
        'scan: for zi in 0.. {
            let z0 = 0.3 + zi as f64 * 0.25;
            if z0 + fd + 0.3 > depth {
                break;
            }
            for xi in 0.. {
                let x0 = 0.3 + xi as f64 * 0.25;
                if x0 + fw + 0.3 > width {
                    break;
                }
                let candidate = Furniture {
                    category: category::SOFA,
                    min: [x0, 0.0, z0],
                    max: [x0 + fw, 0.45, z0 + fd],
                    facing: Facing::PosZ,
                };
                let clear = spec.furniture.iter().all(|f| {
                    candidate.min[0] > f.max[0] + 0.3
                        || candidate.max[0] < f.min[0] - 0.3
                        || candidate.min[2] > f.max[2] + 0.3
                        || candidate.max[2] < f.min[2] - 0.3
                });
                if clear {
                    spec.furniture.push(candidate);
                    break 'scan;
                }
            }
        }
    }
    spec
}

/// Generate the full synthetic dataset on disk: `rooms` seeded rooms with
/// meshes and SDFs, interaction samples split train/val/test by room
/// (last room = test, second-to-last = val), views rendered per sample.
pub fn generate_dataset(
    root: &Path,
    cfg: &DatasetConfig,
    template: &BodyTemplate<f64>,
) -> Result<DatasetSummary, DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let per_room = cfg.samples / cfg.rooms;
    let remainder = cfg.samples % cfg.rooms;
    let mut records = Vec::with_capacity(cfg.samples);
    let mut counts = (0usize, 0usize, 0usize);

    for room_idx in 0..cfg.rooms {
        let id = format!("room{room_idx:02}");
        let spec = make_room_spec(cfg.seed, room_idx);
        let mesh = synth_room::<f64>(&spec)?;
        let sdf = Arc::new(compute_sdf(&mesh, cfg.sdf_dims, cfg.sdf_padding)?);
        write_room(root, &id, &mesh, &sdf)?;

        let split = if room_idx + 1 == cfg.rooms {
            Split::Test
        } else if room_idx + 2 == cfg.rooms {
            Split::Val
        } else {
            Split::Train
        };
        let want = per_room + usize::from(room_idx < remainder);
        let samples = synth_interactions(
            &spec,
            &mesh,
            &sdf,
            template,
            &id,
            split,
            want,
            cfg.seed ^ (room_idx as u64).wrapping_mul(0xA076_1D64_78BD_642F),
            &cfg.camera,
        )?;
        for (k, s) in samples.iter().enumerate() {
            let rel = write_view(root, &id, k, &s.view)?;
            match split {
                Split::Train => counts.0 += 1,
                Split::Val => counts.1 += 1,
                Split::Test => counts.2 += 1,
            }
            records.push(SampleRecord {
                scene_id: s.scene_id.clone(),
                view: rel,
                body: s.body.to_flat(),
                split,
            });
        }
    }
    write_samples(root, &records)?;
    Ok(DatasetSummary {
        rooms: cfg.rooms,
        train: counts.0,
        val: counts.1,
        test: counts.2,
        requested: cfg.samples,
    })
}

// ---- loading for training ----

/// Assemble training inputs from a dataset directory. Scene tensors are
/// encoded once per distinct view.
pub fn build_train_data(
    root: &Path,
    template: Arc<BodyTemplate<f64>>,
    categories: &[u8],
    contact_parts: &[PartLabel],
    refine_edge: f64,
) -> Result<TrainData, DataError> {
    let records = read_samples(root)?;
    let ids = room_ids(root)?;
    let room_index: BTreeMap<&str, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let mut rooms = Vec::with_capacity(ids.len());
    for id in &ids {
        let mesh = load_room_mesh(root, id)?;
        let sdf = Arc::new(load_room_sdf(root, id)?);
        let refined = mesh.refined(refine_edge);
        let scene_points = Arc::new(PointGrid::build(refined.vertices, refine_edge.max(0.05)));
        rooms.push(RoomContext { sdf, scene_points });
    }

    let mut scene_cache: BTreeMap<String, Arc<SceneTensor>> = BTreeMap::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for rec in &records {
        let scene = match scene_cache.get(&rec.view) {
            Some(s) => s.clone(),
            None => {
                let view = load_view(root, &rec.view)?;
                let tensor = Arc::new(encode_scene(&view, categories));
                scene_cache.insert(rec.view.clone(), tensor.clone());
                tensor
            }
        };
        let view = load_view(root, &rec.view)?;
        let room = *room_index.get(rec.scene_id.as_str()).ok_or_else(|| {
            DataError::BadRecord { line: 0, detail: format!("unknown scene id {}", rec.scene_id) }
        })?;
        let item = TrainItem {
            scene,
            x_h: rec.body.clone(),
            camera: view.camera,
            room,
        };
        match rec.split {
            Split::Train => train.push(item),
            Split::Val => val.push(item),
            Split::Test => {}
        }
    }
    let contact_indices = Arc::new(contact_vertices(&template, contact_parts));
    Ok(TrainData { train, val, rooms, template, contact_indices })
}

/// Records (and their parsed bodies) for one split.
pub fn bodies_for_split(records: &[SampleRecord], split: Split) -> Result<Vec<BodyParams<f64>>, DataError> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| BodyParams::from_flat(&r.body).map_err(DataError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn room_specs_are_deterministic_and_furnished() {
        let a = make_room_spec(7, 3);
        let b = make_room_spec(7, 3);
        assert_eq!(a.furniture.len(), b.furniture.len());
        assert!(a.width > 3.0 && a.depth > 3.0);
        assert!(!a.furniture.is_empty());
        // Spec must synthesize without overlap errors.
        synth_room::<f64>(&a).unwrap();
        let c = make_room_spec(7, 4);
        assert!(
            (a.width - c.width).abs() > 1e-9 || a.furniture.len() != c.furniture.len()
        );
    }

    #[test]
    fn sample_records_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            SampleRecord {
                scene_id: "room00".into(),
                view: "rooms/room00/views/0".into(),
                body: (0..75).map(|i| i as f64 * 0.125).collect(),
                split: Split::Train,
            },
            SampleRecord {
                scene_id: "room07".into(),
                view: "rooms/room07/views/3".into(),
                body: (0..75).map(|i| (i as f64 * 0.37).sin()).collect(),
                split: Split::Test,
            },
        ];
        write_samples(dir.path(), &records).unwrap();
        let back = read_samples(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].scene_id, "room00");
        assert_eq!(back[0].body, records[0].body);
        assert_eq!(back[1].split, Split::Test);

        // Field-by-field byte stability.
        let text1 = fs::read(dir.path().join("samples.jsonl")).unwrap();
        write_samples(dir.path(), &back).unwrap();
        let text2 = fs::read(dir.path().join("samples.jsonl")).unwrap();
        assert_eq!(text1, text2);
    }

    #[test]
    fn generated_dataset_splits_are_disjoint_by_scene() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            rooms: 3,
            samples: 9,
            seed: 12,
            sdf_dims: [16, 16, 16],
            ..Default::default()
        };
        let template = crate::body::build_template(7);
        let summary = generate_dataset(dir.path(), &cfg, &template).unwrap();
        assert!(summary.train + summary.val + summary.test > 0);
        let records = read_samples(dir.path()).unwrap();
        let mut by_split: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
        for r in &records {
            let key = match r.split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            by_split.entry(key).or_default().insert(r.scene_id.as_str());
        }
        let sets: Vec<_> = by_split.values().collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(sets[j]), "splits share scenes");
            }
        }
    }

    #[test]
    fn bad_record_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("samples.jsonl"), "{\"not\": \"a record\"}\n").unwrap();
        let err = read_samples(dir.path()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
