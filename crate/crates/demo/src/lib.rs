//! Browser demo. Three views over the preprocessing and encoding code:
//! a synthetic face with its aligned mouth patch and kNN landmark graph,
//! the sinusoidal positional table, and the cosine learning-rate curve.
//!
//! The `wasm_bindgen` exports are thin wrappers over plain functions so the
//! logic is testable natively.

use lipfuse::dataio::{synth_sample, Coupling, SynthConfig};
use lipfuse::geo::{build_knn_graph, positional_encoding};
use lipfuse::preprocess::{align_sample, LandmarkSubset};
use lipfuse::trainer::cosine_lr;
use wasm_bindgen::prelude::*;

/// One synthetic frame before and after alignment.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct FaceView {
    frame_size: usize,
    canvas: usize,
    raw: Vec<u8>,
    raw_landmarks: Vec<f64>,
    patch: Vec<u8>,
    patch_landmarks: Vec<f64>,
    subset: Vec<u32>,
    edges: Vec<u32>,
}

#[wasm_bindgen]
impl FaceView {
    #[wasm_bindgen(getter)]
    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    #[wasm_bindgen(getter)]
    pub fn canvas(&self) -> usize {
        self.canvas
    }

    /// Raw frame, row-major grey bytes.
    pub fn raw(&self) -> Vec<u8> {
        self.raw.clone()
    }

    /// 68 `(x, y)` pairs in raw frame coordinates.
    pub fn raw_landmarks(&self) -> Vec<f64> {
        self.raw_landmarks.clone()
    }

    pub fn patch(&self) -> Vec<u8> {
        self.patch.clone()
    }

    /// 68 `(x, y)` pairs in canvas coordinates.
    pub fn patch_landmarks(&self) -> Vec<f64> {
        self.patch_landmarks.clone()
    }

    /// Landmark indices that form the graph nodes.
    pub fn subset(&self) -> Vec<u32> {
        self.subset.clone()
    }

    /// Flat `(src, dst)` pairs indexing into `subset`, self-loops included.
    pub fn edges(&self) -> Vec<u32> {
        self.edges.clone()
    }
}

pub fn face_view(
    coupling: &str,
    classes: usize,
    class: usize,
    index: usize,
    frame: usize,
    subset: usize,
    k: usize,
) -> Result<FaceView, String> {
    let coupling: Coupling = coupling.parse().map_err(|e| format!("{e}"))?;
    let subset: LandmarkSubset = subset.to_string().parse().map_err(|e| format!("{e}"))?;
    let cfg = SynthConfig::new(classes, 2, 0, coupling);
    if class >= classes {
        return Err(format!("class {class} out of range for {classes} classes"));
    }
    let sample = synth_sample(&cfg, class, index).map_err(|e| e.to_string())?;
    let frame = frame.min(sample.len() - 1);
    let canvas = 96;
    let aligned = align_sample(&sample, canvas).map_err(|e| e.to_string())?;

    let flat = |pts: &[[f32; 2]]| pts.iter().flat_map(|p| [f64::from(p[0]), f64::from(p[1])]).collect::<Vec<_>>();
    let indices = subset.indices();
    let nodes: Vec<[f64; 2]> = indices
        .iter()
        .map(|&i| {
            let p = aligned.landmarks[frame][i];
            [f64::from(p[0]), f64::from(p[1])]
        })
        .collect();
    let graph = build_knn_graph(&nodes, k).map_err(|e| e.to_string())?;
    Ok(FaceView {
        frame_size: cfg.frame_size,
        canvas,
        raw: sample.frames[frame].pixels.clone(),
        raw_landmarks: flat(&sample.landmarks[frame]),
        patch: aligned.patches[frame].pixels.clone(),
        patch_landmarks: flat(&aligned.landmarks[frame]),
        subset: indices.iter().map(|&i| i as u32).collect(),
        edges: graph.edges.iter().flat_map(|&(s, d)| [s as u32, d as u32]).collect(),
    })
}

pub fn positional_table(steps: usize, dim: usize) -> Result<Vec<f64>, String> {
    if steps == 0 || dim == 0 || dim % 2 != 0 || steps * dim > 1 << 20 {
        return Err(format!("need steps > 0 and an even width, got {steps} x {dim}"));
    }
    Ok(positional_encoding::<f64>(steps, dim).data().to_vec())
}

pub fn lr_curve(lr0: f64, t_max: usize, epochs: usize) -> Result<Vec<f64>, String> {
    if t_max == 0 || !(lr0 > 0.0) || epochs > 100_000 {
        return Err("need a positive learning rate and horizon".into());
    }
    Ok((0..epochs).map(|e| cosine_lr(e, lr0, t_max)).collect())
}

#[wasm_bindgen(js_name = faceView)]
pub fn face_view_js(
    coupling: &str,
    classes: usize,
    class: usize,
    index: usize,
    frame: usize,
    subset: usize,
    k: usize,
) -> Result<FaceView, JsError> {
    face_view(coupling, classes, class, index, frame, subset, k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = positionalTable)]
pub fn positional_table_js(steps: usize, dim: usize) -> Result<Vec<f64>, JsError> {
    positional_table(steps, dim).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve_js(lr0: f64, t_max: usize, epochs: usize) -> Result<Vec<f64>, JsError> {
    lr_curve(lr0, t_max, epochs).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_view_has_consistent_sizes() {
        let v = face_view("complementary", 10, 3, 1, 12, 20, 5).unwrap();
        assert_eq!(v.raw.len(), v.frame_size * v.frame_size);
        assert_eq!(v.patch.len(), v.canvas * v.canvas);
        assert_eq!(v.raw_landmarks.len(), 136);
        assert_eq!(v.subset.len(), 20);
        assert_eq!(v.edges.len(), 2 * 20 * 6);
        assert!(v.edges.iter().all(|&i| i < 20));
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(face_view("nope", 10, 0, 0, 0, 20, 5).is_err());
        assert!(face_view("visual_only", 10, 10, 0, 0, 20, 5).is_err());
        assert!(face_view("visual_only", 10, 0, 0, 0, 21, 5).is_err());
        assert!(face_view("visual_only", 10, 0, 0, 0, 20, 20).is_err());
        assert!(positional_table(4, 3).is_err());
        assert!(lr_curve(0.0, 10, 10).is_err());
    }

    #[test]
    fn curves_have_the_requested_length() {
        assert_eq!(positional_table(30, 8).unwrap().len(), 240);
        let c = lr_curve(1e-3, 10, 12).unwrap();
        assert_eq!(c[0], 1e-3);
        assert_eq!(c[11], 0.0);
    }
}
