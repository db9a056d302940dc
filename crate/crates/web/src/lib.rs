//! Browser bindings: an ROI round trip, the mask-versus-ROI footprint
//! comparison, and the analytic cost curve. Images are RGBA bytes, row
//! major, ready for `ImageData`.

use roictrl_core::bench::{flop_model, BenchConfig, Path};
use roictrl_core::diffusion::scene::SceneGen;
use roictrl_core::roi::{quantized_edges, roi_align, roi_unpool, RoiBox, RoiBoxBatch};
use roictrl_core::Tensor;
use wasm_bindgen::prelude::*;

fn rgba(img: &Tensor<f64>, alpha: impl Fn(usize) -> u8) -> Vec<u8> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(4 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(((img.data()[c * h * w + p] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
        out.push(alpha(p));
    }
    out
}

fn make_box(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<RoiBox, JsError> {
    RoiBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2)).map_err(|e| JsError::new(&e.to_string()))
}

fn scene(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut g = SceneGen::new(h, w);
    g.min_instances = 3;
    g.allow_overlap = true;
    g.scene::<f64>(seed).image
}

/// Synthetic scene used as the feature map.
#[wasm_bindgen]
pub fn source_image(seed: u64, h: usize, w: usize) -> Vec<u8> {
    rgba(&scene(seed, h, w), |_| 255)
}

/// The `r × r` ROI-Align grid of the box.
#[wasm_bindgen]
pub fn roi_grid(seed: u64, h: usize, w: usize, x1: f64, y1: f64, x2: f64, y2: f64, r: usize) -> Result<Vec<u8>, JsError> {
    let img = scene(seed, h, w);
    let x = Tensor::from_vec(&[1, 3, h, w], img.into_vec()).map_err(|e| JsError::new(&e.to_string()))?;
    let boxes = RoiBoxBatch::single(&[make_box(x1, y1, x2, y2)?]);
    let roi = roi_align(&x, &boxes, r).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(rgba(&roi.data, |_| 255))
}

/// `unpool(align(x))` on the footprint; elsewhere the source at a quarter
/// opacity.
#[wasm_bindgen]
pub fn roi_round_trip(seed: u64, h: usize, w: usize, x1: f64, y1: f64, x2: f64, y2: f64, r: usize) -> Result<Vec<u8>, JsError> {
    let img = scene(seed, h, w);
    let x = Tensor::from_vec(&[1, 3, h, w], img.data().to_vec()).map_err(|e| JsError::new(&e.to_string()))?;
    let boxes = RoiBoxBatch::single(&[make_box(x1, y1, x2, y2)?]);
    let roi = roi_align(&x, &boxes, r).map_err(|e| JsError::new(&e.to_string()))?;
    let (back, occ) = roi_unpool(&roi, &boxes, h, w).map_err(|e| JsError::new(&e.to_string()))?;
    let mut mixed = img.clone();
    for p in 0..h * w {
        if occ.is_occupied(0, 0, p) {
            for c in 0..3 {
                mixed.data_mut()[c * h * w + p] = back.data()[c * h * w + p];
            }
        }
    }
    Ok(rgba(&mixed, |p| if occ.is_occupied(0, 0, p) { 255 } else { 64 }))
}

/// Pixel classes of the two footprints: 0 neither, 1 both, 2 mask only,
/// 3 ROI only.
pub fn footprint_classes(h: usize, w: usize, bx: &RoiBox) -> Vec<u8> {
    let ((qx1, qx2), (qy1, qy2)) = quantized_edges(bx, h, w);
    let mut out = vec![0; h * w];
    for py in 0..h {
        for px in 0..w {
            let mask = px >= qx1 && px < qx2 && py >= qy1 && py < qy2;
            let roi = bx.contains_pixel_center(py, px, h, w);
            out[py * w + px] = match (mask, roi) {
                (false, false) => 0,
                (true, true) => 1,
                (true, false) => 2,
                (false, true) => 3,
            };
        }
    }
    out
}

/// RGBA view of [`footprint_classes`]: gray where both agree, red where
/// only the quantized mask covers, blue where only the exact box does.
#[wasm_bindgen]
pub fn footprint_overlay(h: usize, w: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Vec<u8>, JsError> {
    let classes = footprint_classes(h, w, &make_box(x1, y1, x2, y2)?);
    let mut out = Vec::with_capacity(4 * h * w);
    for c in classes {
        out.extend_from_slice(match c {
            0 => &[24, 24, 24, 255],
            1 => &[150, 150, 150, 255],
            2 => &[230, 60, 60, 255],
            _ => &[60, 110, 230, 255],
        });
    }
    Ok(out)
}

/// Distance in pixels from each continuous box edge (left, right, top,
/// bottom) to the edge of the nearest-integer mask.
#[wasm_bindgen]
pub fn edge_gaps(h: usize, w: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Vec<f64>, JsError> {
    let bx = make_box(x1, y1, x2, y2)?;
    let ((qx1, qx2), (qy1, qy2)) = quantized_edges(&bx, h, w);
    let ((xl, xh), (yl, yh)) = bx.pixel_edges(h, w);
    Ok(vec![qx1 as f64 - xl, qx2 as f64 - xh, qy1 as f64 - yl, qy2 as f64 - yh])
}

/// Instance-attention FLOPs `[mask, roi]` per side in `sides`.
#[wasm_bindgen]
pub fn attention_flops(sides: Vec<u32>, r: usize, n: usize, c: usize, l: usize) -> Vec<f64> {
    sides
        .iter()
        .flat_map(|&s| {
            let cfg = BenchConfig {
                h: s as usize,
                w: s as usize,
                r,
                n,
                c,
                l,
            };
            [
                flop_model(Path::Mask, &cfg, 0).instance_attention,
                flop_model(Path::Roi, &cfg, 0).instance_attention,
            ]
        })
        .collect()
}
