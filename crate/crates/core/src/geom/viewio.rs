//! View bundle directory: depth.raw (f32 row-major), semantics.raw (u8
//! row-major), camera.json.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

use super::camera::{Camera, SceneView};
use super::vec::{Mat3, RigidTransform};
use super::GeomError;

const F: &str = "view bundle";

#[derive(Serialize, Deserialize)]
struct CameraJson {
    k: Vec<f64>,
    t_c_w: Vec<f64>,
    width: usize,
    height: usize,
    max_depth: f64,
}

pub fn write_view_bundle<T: Real>(dir: &Path, view: &SceneView<T>) -> Result<(), GeomError> {
    fs::create_dir_all(dir)?;
    let mut depth_bytes = Vec::with_capacity(view.depth.len() * 4);
    for d in &view.depth {
        depth_bytes.extend_from_slice(&(d.to_f64_lossy() as f32).to_le_bytes());
    }
    fs::write(dir.join("depth.raw"), depth_bytes)?;
    fs::write(dir.join("semantics.raw"), &view.semantics)?;
    let cam = &view.camera;
    let json = CameraJson {
        k: cam.intrinsics.values_row_major().iter().map(|v| v.to_f64_lossy()).collect(),
        t_c_w: cam.cam_to_world.to_matrix4().iter().map(|v| v.to_f64_lossy()).collect(),
        width: cam.width,
        height: cam.height,
        max_depth: cam.max_depth.to_f64_lossy(),
    };
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| GeomError::format(F, format!("camera.json encode: {e}")))?;
    fs::write(dir.join("camera.json"), text)?;
    Ok(())
}

pub fn read_view_bundle<T: Real>(dir: &Path) -> Result<SceneView<T>, GeomError> {
    let text = fs::read_to_string(dir.join("camera.json"))?;
    let json: CameraJson = serde_json::from_str(&text)
        .map_err(|e| GeomError::format(F, format!("camera.json: {e}")))?;
    if json.k.len() != 9 {
        return Err(GeomError::format(F, "camera.json: K must have 9 values"));
    }
    let k_vals: Vec<T> = json.k.iter().map(|&v| T::cst(v)).collect();
    let t_vals: Vec<T> = json.t_c_w.iter().map(|&v| T::cst(v)).collect();
    let camera = Camera::new(
        Mat3::from_row_major(&k_vals),
        RigidTransform::from_matrix4(&t_vals)?,
        json.width,
        json.height,
        T::cst(json.max_depth),
    )?;

    let depth_bytes = fs::read(dir.join("depth.raw"))?;
    let expected = camera.width * camera.height * 4;
    if depth_bytes.len() != expected {
        return Err(GeomError::format(
            F,
            format!("depth.raw is {} bytes, expected {}", depth_bytes.len(), expected),
        ));
    }
    let depth = depth_bytes
        .chunks_exact(4)
        .map(|c| T::cst(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let semantics = fs::read(dir.join("semantics.raw"))?;
    if semantics.len() != camera.width * camera.height {
        return Err(GeomError::format(
            F,
            format!(
                "semantics.raw is {} bytes, expected {}",
                semantics.len(),
                camera.width * camera.height
            ),
        ));
    }
    Ok(SceneView { depth, semantics, camera })
}
