use crate::diff::Tensor;
use crate::geom::{SceneView, BACKGROUND_LABEL};

/// Network input resolution.
pub const SCENE_SIZE: usize = 128;

/// Scene tensor: one normalized depth channel plus C one-hot semantic
/// channels at 128x128, aspect ratio preserved with zero padding
/// (top-left anchored).
#[derive(Debug, Clone)]
pub struct SceneTensor {
    /// (1 + C, 128, 128)
    pub data: Tensor<f64>,
    pub channels: usize,
    /// Content region actually covered by the resized view.
    pub content: (usize, usize),
    pub depth_all_zero: bool,
}

/// Resize a view into the network input. Depth is normalized by the
/// camera's max depth; semantics are nearest-neighbor resampled and one-hot
/// expanded over `categories` (background pixels stay all-zero, ids not in
/// the list fall into the last channel).
pub fn encode_scene(view: &SceneView<f64>, categories: &[u8]) -> SceneTensor {
    let (w, h) = (view.camera.width, view.camera.height);
    let scale = (SCENE_SIZE as f64 / w as f64).min(SCENE_SIZE as f64 / h as f64);
    let out_w = ((w as f64 * scale).round() as usize).clamp(1, SCENE_SIZE);
    let out_h = ((h as f64 * scale).round() as usize).clamp(1, SCENE_SIZE);

    let c = categories.len();
    let plane = SCENE_SIZE * SCENE_SIZE;
    let mut data = vec![0.0f64; (1 + c) * plane];
    let mut depth_all_zero = true;
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let sy = sy.min(h - 1);
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
            let sx = sx.min(w - 1);
            let d = view.depth_at(sx, sy).max(0.0) / view.camera.max_depth;
            if d > 0.0 {
                depth_all_zero = false;
            }
            data[y * SCENE_SIZE + x] = d.min(1.0);
            let label = view.label_at(sx, sy);
            if label != BACKGROUND_LABEL {
                let ch = categories
                    .iter()
                    .position(|&cat| cat == label)
                    .unwrap_or(c.saturating_sub(1));
                data[(1 + ch) * plane + y * SCENE_SIZE + x] = 1.0;
            }
        }
    }
    SceneTensor {
        data: Tensor::new(&[1 + c, SCENE_SIZE, SCENE_SIZE], data).expect("scene tensor shape"),
        channels: 1 + c,
        content: (out_w, out_h),
        depth_all_zero,
    }
}
