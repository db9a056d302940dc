//! Synthetic multi-instance scenes: colored shapes in boxes over a solid
//! background, with a closed caption vocabulary.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::roi::{RoiBox, RoiBoxBatch};
use crate::tensor::{Scalar, Tensor};

pub const COLOR_NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"];
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, -1.0],
];
pub const BACKGROUND_NAMES: [&str; 2] = ["black", "gray"];
pub const BACKGROUNDS: [[f64; 3]; 2] = [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

/// Caption vocabulary: colors, then shapes, then backgrounds.
pub const VOCAB: usize = 8 + 3 + 2;

pub fn color_token(color: usize) -> usize {
    color
}

pub fn shape_token(shape: Shape) -> usize {
    8 + shape.index()
}

pub fn background_token(bg: usize) -> usize {
    11 + bg
}

pub fn token_name(tok: usize) -> &'static str {
    match tok {
        0..=7 => COLOR_NAMES[tok],
        8..=10 => Shape::ALL[tok - 8].name(),
        _ => BACKGROUND_NAMES[tok - 11],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub color: usize,
    pub shape: Shape,
    pub bx: RoiBox,
}

impl Instance {
    pub fn caption(&self) -> Vec<usize> {
        vec![color_token(self.color), shape_token(self.shape)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub background: usize,
    /// Drawn in order; later instances occlude earlier ones.
    pub instances: Vec<Instance>,
}

impl Layout {
    /// Background word followed by every instance's words.
    pub fn global_caption(&self) -> Vec<usize> {
        let mut t = vec![background_token(self.background)];
        for inst in &self.instances {
            t.extend(inst.caption());
        }
        t
    }

    pub fn boxes(&self) -> Vec<RoiBox> {
        self.instances.iter().map(|i| i.bx).collect()
    }

    pub fn box_batch(&self) -> RoiBoxBatch {
        RoiBoxBatch::single(&self.boxes())
    }
}

/// A rendered layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene<T> {
    pub layout: Layout,
    /// `3 × h × w` in [-1, 1].
    pub image: Tensor<T>,
    /// Per instance, the fraction of its shape left visible after occlusion.
    pub visibility: Vec<f64>,
    /// Per instance, its full (unoccluded) shape area in pixels.
    pub shape_area: Vec<usize>,
}

/// Whether the pixel `(py, px)` of an `h × w` raster is covered by `shape`
/// drawn in `bx`.
pub fn shape_covers(shape: Shape, bx: &RoiBox, py: usize, px: usize, h: usize, w: usize) -> bool {
    let u = (px as f64 + 0.5) / w as f64;
    let v = (py as f64 + 0.5) / h as f64;
    if u < bx.x1 || u >= bx.x2 || v < bx.y1 || v >= bx.y2 {
        return false;
    }
    let cx = (bx.x1 + bx.x2) / 2.0;
    let bw = bx.x2 - bx.x1;
    let bh = bx.y2 - bx.y1;
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let dx = (u - cx) / (bw / 2.0);
            let dy = (v - (bx.y1 + bx.y2) / 2.0) / (bh / 2.0);
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            // Apex at the top center; row width taken at the row's lower
            // edge, at least one pixel.
            let vb = ((py + 1) as f64 / h as f64).min(bx.y2);
            let half = ((vb - bx.y1) / bh * bw / 2.0).max(0.5 / w as f64);
            (u - cx).abs() <= half + 1e-12
        }
    }
}

/// Renders a layout at `h × w`.
pub fn render<T: Scalar>(layout: &Layout, h: usize, w: usize) -> Result<ToyScene<T>> {
    if layout.background >= BACKGROUNDS.len() {
        return Err(Error::Param(format!("background {} out of range", layout.background)));
    }
    for inst in &layout.instances {
        if inst.color >= PALETTE.len() {
            return Err(Error::Param(format!("color {} out of range", inst.color)));
        }
    }
    let n = layout.instances.len();
    let mut owner = vec![usize::MAX; h * w];
    let mut area = vec![0usize; n];
    for (i, inst) in layout.instances.iter().enumerate() {
        for py in 0..h {
            for px in 0..w {
                if shape_covers(inst.shape, &inst.bx, py, px, h, w) {
                    owner[py * w + px] = i;
                    area[i] += 1;
                }
            }
        }
    }
    let mut visible = vec![0usize; n];
    let mut img = Tensor::zeros(&[3, h, w]);
    let bg = BACKGROUNDS[layout.background];
    for p in 0..h * w {
        let col = match owner[p] {
            usize::MAX => bg,
            i => {
                visible[i] += 1;
                PALETTE[layout.instances[i].color]
            }
        };
        for ch in 0..3 {
            img.data_mut()[ch * h * w + p] = T::c(col[ch]);
        }
    }
    let visibility = visible
        .iter()
        .zip(&area)
        .map(|(&v, &a)| if a == 0 { 0.0 } else { v as f64 / a as f64 })
        .collect();
    Ok(ToyScene {
        layout: layout.clone(),
        image: img,
        visibility,
        shape_area: area,
    })
}

/// Random layout generator. Box edges are snapped to the pixel grid of the
/// target raster.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGen {
    pub h: usize,
    pub w: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Box side range as a fraction of the image side.
    pub min_side: f64,
    pub max_side: f64,
    /// Permit overlapping boxes (occlusion by draw order).
    pub allow_overlap: bool,
}

impl SceneGen {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            min_instances: 1,
            max_instances: 6,
            min_side: 0.125,
            max_side: 0.4,
            allow_overlap: false,
        }
    }

    pub fn layout<R: Rng + ?Sized>(&self, rng: &mut R) -> Layout {
        let n = rng.gen_range(self.min_instances..=self.max_instances);
        let mut instances: Vec<Instance> = Vec::with_capacity(n);
        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
        let side = |rng: &mut R, len: usize| {
            let lo = ((self.min_side * len as f64).round() as usize).max(2);
            let hi = ((self.max_side * len as f64).round() as usize).clamp(lo, len);
            rng.gen_range(lo..=hi)
        };
        let mut tries = 0;
        while instances.len() < n && tries < 200 {
            tries += 1;
            let bw = side(rng, self.w);
            let bh = side(rng, self.h);
            let x = rng.gen_range(0..=self.w - bw);
            let y = rng.gen_range(0..=self.h - bh);
            let clash = placed
                .iter()
                .any(|&(px, py, pw, ph)| x < px + pw + 1 && px < x + bw + 1 && y < py + ph + 1 && py < y + bh + 1);
            if clash && !self.allow_overlap {
                continue;
            }
            placed.push((x, y, bw, bh));
            let bx = RoiBox::new(
                x as f64 / self.w as f64,
                y as f64 / self.h as f64,
                (x + bw) as f64 / self.w as f64,
                (y + bh) as f64 / self.h as f64,
            )
            .expect("snapped box is valid");
            instances.push(Instance {
                color: rng.gen_range(0..PALETTE.len()),
                shape: Shape::ALL[rng.gen_range(0..3)],
                bx,
            });
        }
        Layout {
            background: rng.gen_range(0..BACKGROUNDS.len()),
            instances,
        }
    }

    pub fn scene<T: Scalar>(&self, seed: u64) -> ToyScene<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = self.layout(&mut rng);
        render(&layout, self.h, self.w).expect("generated layout is valid")
    }
}

/// Renders `layout`, or a random layout from `gen` seeded by `seed` when no
/// layout is given.
pub fn synth_scene<T: Scalar>(seed: u64, layout: Option<&Layout>, gen: &SceneGen) -> Result<ToyScene<T>> {
    match layout {
        Some(l) => render(l, gen.h, gen.w),
        None => Ok(gen.scene(seed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_square() -> Layout {
        Layout {
            background: 0,
            instances: vec![Instance {
                color: 0,
                shape: Shape::Square,
                bx: RoiBox::new(0.25, 0.25, 0.75, 0.75).unwrap(),
            }],
        }
    }

    #[test]
    fn red_square_histogram() {
        let s: ToyScene<f64> = render(&red_square(), 64, 64).unwrap();
        let mut red = 0;
        let mut black = 0;
        for p in 0..64 * 64 {
            let px = [s.image.data()[p], s.image.data()[4096 + p], s.image.data()[8192 + p]];
            if px == PALETTE[0] {
                red += 1;
                let (y, x) = (p / 64, p % 64);
                assert!((16..48).contains(&y) && (16..48).contains(&x));
            } else if px == BACKGROUNDS[0] {
                black += 1;
            }
        }
        assert_eq!((red, black), (32 * 32, 4096 - 32 * 32));
        assert_eq!(s.visibility, vec![1.0]);
    }

    #[test]
    fn empty_layout_is_uniform_background() {
        let l = Layout {
            background: 1,
            instances: vec![],
        };
        let s: ToyScene<f32> = render(&l, 8, 8).unwrap();
        assert!(s.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_scene() {
        let g = SceneGen::new(32, 32);
        assert_eq!(g.scene::<f32>(9), g.scene::<f32>(9));
        assert_ne!(g.scene::<f32>(9), g.scene::<f32>(10));
    }

    #[test]
    fn shapes_stay_inside_their_boxes() {
        let mut g = SceneGen::new(32, 48);
        g.allow_overlap = true;
        for seed in 0..50 {
            let s: ToyScene<f64> = g.scene(seed);
            assert!(s.layout.instances.len() >= 1);
            for (i, inst) in s.layout.instances.iter().enumerate() {
                assert!(s.shape_area[i] > 0);
                for py in 0..32 {
                    for px in 0..48 {
                        if shape_covers(inst.shape, &inst.bx, py, px, 32, 48) {
                            assert!(inst.bx.contains_pixel_center(py, px, 32, 48));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn later_instances_occlude() {
        let bx = RoiBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let l = Layout {
            background: 0,
            instances: vec![
                Instance {
                    color: 1,
                    shape: Shape::Square,
                    bx,
                },
                Instance {
                    color: 2,
                    shape: Shape::Square,
                    bx,
                },
            ],
        };
        let s: ToyScene<f64> = render(&l, 8, 8).unwrap();
        assert_eq!(s.visibility, vec![0.0, 1.0]);
        assert_eq!(s.image.data()[2 * 64], 1.0);
    }
}
