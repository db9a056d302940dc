//! Rule-based detector for the synthetic palette.

use crate::diffusion::scene::{Shape, BACKGROUNDS, PALETTE};
use crate::roi::RoiBox;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bx: RoiBox,
    pub color: usize,
    pub shape: Shape,
    pub confidence: f64,
    pub area: usize,
}

/// Components smaller than this many pixels are dropped.
pub const MIN_AREA: usize = 8;

/// Fill ratio (component area over its bounding-box area) to shape.
pub fn classify_fill(ratio: f64) -> Shape {
    if ratio >= 0.9 {
        Shape::Square
    } else if ratio >= 0.69 {
        Shape::Circle
    } else {
        Shape::Triangle
    }
}

/// Nearest palette entry of a pixel, or `None` when a background color is
/// nearer. Also returns the squared distance.
pub fn classify_pixel(rgb: [f64; 3]) -> (Option<usize>, f64) {
    let d2 = |c: &[f64; 3]| (0..3).map(|i| (rgb[i] - c[i]).powi(2)).sum::<f64>();
    let mut best = (None, f64::INFINITY);
    for (i, c) in PALETTE.iter().enumerate() {
        let d = d2(c);
        if d < best.1 {
            best = (Some(i), d);
        }
    }
    for c in &BACKGROUNDS {
        let d = d2(c);
        if d < best.1 {
            best = (None, d);
        }
    }
    best
}

/// Detects colored shapes in a `3 × h × w` image in [-1, 1].
pub fn detect<T: Scalar>(image: &Tensor<T>) -> Vec<Detection> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let d = image.data();
    let mut label = vec![usize::MAX; hw];
    let mut dist = vec![0.0; hw];
    for p in 0..hw {
        let (c, dd) = classify_pixel([d[p].f64(), d[hw + p].f64(), d[2 * hw + p].f64()]);
        if let Some(c) = c {
            label[p] = c;
        }
        dist[p] = dd;
    }
    let mut seen = vec![false; hw];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..hw {
        if seen[start] || label[start] == usize::MAX {
            continue;
        }
        let color = label[start];
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0;
        let mut pure = 0;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            area += 1;
            if dist[p] < 0.25 {
                pure += 1;
            }
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if !seen[q] && label[q] == color {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if area < MIN_AREA {
            continue;
        }
        let fill = area as f64 / ((x1 - x0) * (y1 - y0)) as f64;
        let bx = RoiBox::new(x0 as f64 / w as f64, y0 as f64 / h as f64, x1 as f64 / w as f64, y1 as f64 / h as f64)
            .expect("component box is non-empty");
        out.push(Detection {
            bx,
            color,
            shape: classify_fill(fill),
            confidence: pure as f64 / area as f64,
            area,
        });
    }
    out
}

/// Intersection over union of two boxes.
pub fn iou(a: &RoiBox, b: &RoiBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::scene::{render, Instance, Layout, SceneGen, ToyScene};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> RoiBox {
        RoiBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.1, 0.2, 0.5, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(0.6, 0.6, 0.9, 0.9)), 0.0);
        assert_eq!(iou(&RoiBox::full(), &b(0.0, 0.0, 0.5, 1.0)), 0.5);
        let c = b(0.3, 0.1, 0.8, 0.4);
        assert_eq!(iou(&a, &c), iou(&c, &a));
    }

    #[test]
    fn single_red_square() {
        let l = Layout {
            background: 0,
            instances: vec![Instance {
                color: 0,
                shape: Shape::Square,
                bx: b(0.25, 0.25, 0.75, 0.75),
            }],
        };
        let s: ToyScene<f32> = render(&l, 64, 64).unwrap();
        let d = detect(&s.image);
        assert_eq!(d.len(), 1);
        assert!(iou(&d[0].bx, &l.instances[0].bx) >= 0.95);
        assert_eq!((d[0].color, d[0].shape), (0, Shape::Square));
    }

    #[test]
    fn uniform_background_has_no_detections() {
        for bg in 0..2 {
            let s: ToyScene<f64> = render(&Layout { background: bg, instances: vec![] }, 32, 32).unwrap();
            assert!(detect(&s.image).is_empty());
        }
    }

    #[test]
    fn two_disjoint_shapes() {
        let l = Layout {
            background: 1,
            instances: vec![
                Instance {
                    color: 2,
                    shape: Shape::Circle,
                    bx: b(0.0, 0.0, 0.4, 0.4),
                },
                Instance {
                    color: 3,
                    shape: Shape::Triangle,
                    bx: b(0.5, 0.5, 1.0, 0.9),
                },
            ],
        };
        let s: ToyScene<f64> = render(&l, 64, 64).unwrap();
        let mut cols: Vec<usize> = detect(&s.image).iter().map(|d| d.color).collect();
        cols.sort();
        assert_eq!(cols, vec![2, 3]);
    }

    #[test]
    fn rasterize_round_trip() {
        let g = SceneGen::new(64, 64);
        for seed in 0..200 {
            let s: ToyScene<f32> = g.scene(seed);
            let dets = detect(&s.image);
            for inst in &s.layout.instances {
                let best = dets
                    .iter()
                    .max_by(|a, b| iou(&a.bx, &inst.bx).total_cmp(&iou(&b.bx, &inst.bx)))
                    .expect("detections");
                assert!(iou(&best.bx, &inst.bx) >= 0.9, "seed {seed}: {inst:?} vs {best:?}");
                assert_eq!(best.color, inst.color, "seed {seed}");
                assert_eq!(best.shape, inst.shape, "seed {seed}: {inst:?} {best:?}");
            }
        }
    }
}
