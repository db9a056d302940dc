//! Layout-fidelity metrics over generated scenes.

use std::fmt::Write;

use super::detect::{detect, iou};
use super::matching::hungarian_match;
use crate::diffusion::scene::ToyScene;
use crate::roi::footprint_area;
use crate::tensor::{Scalar, Tensor};

pub const REPORT_HEADER: &str = "track,n_instances,size_bucket,mIoU,acc_color,acc_shape,success_rate";

/// IoU needed for an instance to count as a success.
pub const SUCCESS_IOU: f64 = 0.5;
/// Minimum visible fraction for attribute scoring.
pub const MIN_VISIBILITY: f64 = 0.5;

/// Outcome for one ground-truth instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceScore {
    pub n_instances: usize,
    pub small: bool,
    pub iou: f64,
    pub matched: bool,
    /// `None` when the instance is too occluded to score attributes.
    pub color_ok: Option<bool>,
    pub shape_ok: Option<bool>,
}

impl InstanceScore {
    pub fn success(&self) -> bool {
        self.iou >= SUCCESS_IOU && self.color_ok == Some(true) && self.shape_ok == Some(true)
    }
}

/// Scores every ground-truth instance of `scene` against detections in
/// `image`.
pub fn score_scene<T: Scalar>(scene: &ToyScene<T>, image: &Tensor<T>) -> Vec<InstanceScore> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let small_limit = (h / 8) * (w / 8);
    let dets = detect(image);
    let gts = &scene.layout.instances;
    let (rows, cols) = (gts.len(), dets.len());
    let mut m = vec![0.0; rows * cols];
    for (i, g) in gts.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            m[i * cols + j] = iou(&g.bx, &d.bx);
        }
    }
    let matches = hungarian_match(&m, rows, cols);
    gts.iter()
        .enumerate()
        .map(|(i, g)| {
            let pair = matches.pairs.iter().find(|p| p.0 == i);
            let visible = scene.visibility.get(i).copied().unwrap_or(1.0) >= MIN_VISIBILITY;
            let (iou_v, color_ok, shape_ok) = match pair {
                Some(&(_, j)) => (m[i * cols + j], dets[j].color == g.color, dets[j].shape == g.shape),
                None => (0.0, false, false),
            };
            InstanceScore {
                n_instances: rows,
                small: footprint_area(&g.bx, h, w) < small_limit,
                iou: iou_v,
                matched: pair.is_some(),
                color_ok: visible.then_some(color_ok),
                shape_ok: visible.then_some(shape_ok),
            }
        })
        .collect()
}

/// Aggregate metrics over a set of instance scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub count: usize,
    /// Mean IoU over ground-truth instances; unmatched ones count as 0.
    pub miou: f64,
    /// Color accuracy over matched, visible instances (0 when none).
    pub acc_color: f64,
    pub acc_shape: f64,
    /// Fraction of instances with IoU ≥ 0.5 and both attributes right.
    pub success_rate: f64,
}

pub fn summarize<'a>(scores: impl IntoIterator<Item = &'a InstanceScore>) -> Summary {
    let mut s = Summary::default();
    let (mut iou_sum, mut matched, mut color, mut shape, mut succ) = (0.0, 0, 0, 0, 0);
    for x in scores {
        s.count += 1;
        iou_sum += x.iou;
        if x.matched {
            if let (Some(c), Some(sh)) = (x.color_ok, x.shape_ok) {
                matched += 1;
                color += c as usize;
                shape += sh as usize;
            }
        }
        succ += x.success() as usize;
    }
    if s.count > 0 {
        s.miou = iou_sum / s.count as f64;
        s.success_rate = succ as f64 / s.count as f64;
    }
    if matched > 0 {
        s.acc_color = color as f64 / matched as f64;
        s.acc_shape = shape as f64 / matched as f64;
    }
    s
}

/// Scores and summarizes generated images against their scenes.
pub fn bench_metrics<T: Scalar>(scenes: &[ToyScene<T>], images: &[Tensor<T>]) -> (Summary, Vec<InstanceScore>) {
    assert_eq!(scenes.len(), images.len(), "one image per scene");
    let scores: Vec<InstanceScore> = scenes.iter().zip(images).flat_map(|(s, i)| score_scene(s, i)).collect();
    (summarize(&scores), scores)
}

/// CSV report: overall, per instance count and per size bucket.
pub fn report_csv(track: &str, scores: &[InstanceScore]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    let mut row = |n: &str, bucket: &str, s: Summary| {
        let _ = writeln!(out, "{track},{n},{bucket},{:.6},{:.6},{:.6},{:.6}", s.miou, s.acc_color, s.acc_shape, s.success_rate);
    };
    row("all", "all", summarize(scores));
    let max_n = scores.iter().map(|s| s.n_instances).max().unwrap_or(0);
    for n in 1..=max_n {
        let sub: Vec<&InstanceScore> = scores.iter().filter(|s| s.n_instances == n).collect();
        if !sub.is_empty() {
            row(&n.to_string(), "all", summarize(sub));
        }
    }
    for (name, small) in [("small", true), ("large", false)] {
        let sub: Vec<&InstanceScore> = scores.iter().filter(|s| s.small == small).collect();
        if !sub.is_empty() {
            row("all", name, summarize(sub));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::scene::SceneGen;

    fn scenes(k: usize) -> Vec<ToyScene<f32>> {
        let g = SceneGen::new(64, 64);
        (0..k as u64).map(|s| g.scene(s)).collect()
    }

    #[test]
    fn ground_truth_images_score_high() {
        let sc = scenes(40);
        let imgs: Vec<_> = sc.iter().map(|s| s.image.clone()).collect();
        let (s, _) = bench_metrics(&sc, &imgs);
        assert!(s.miou >= 0.95, "{s:?}");
        assert!(s.acc_color >= 0.99 && s.acc_shape >= 0.99, "{s:?}");
    }

    #[test]
    fn blank_images_score_zero() {
        let sc = scenes(10);
        let imgs: Vec<_> = sc.iter().map(|s| Tensor::full(s.image.shape(), -1.0)).collect();
        let (s, _) = bench_metrics(&sc, &imgs);
        assert_eq!((s.miou, s.acc_color, s.acc_shape, s.success_rate), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn half_blank_halves_miou() {
        let sc = scenes(10);
        let perfect: Vec<_> = sc.iter().map(|s| s.image.clone()).collect();
        let (p, _) = bench_metrics(&sc, &perfect);
        let mut both = sc.clone();
        both.extend(sc.iter().cloned());
        let mut imgs = perfect.clone();
        imgs.extend(sc.iter().map(|s| Tensor::full(s.image.shape(), -1.0)));
        let (h, _) = bench_metrics(&both, &imgs);
        assert!((h.miou - p.miou / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_has_header_and_overall_row() {
        let sc = scenes(5);
        let imgs: Vec<_> = sc.iter().map(|s| s.image.clone()).collect();
        let (_, scores) = bench_metrics(&sc, &imgs);
        let csv = report_csv("gt", &scores);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(REPORT_HEADER));
        assert!(lines.next().unwrap().starts_with("gt,all,all,"));
    }
}
