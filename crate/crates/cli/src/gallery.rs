use roictrl_core::diffusion::scene::{Instance, Layout, Shape};
use roictrl_core::roi::RoiBox;

fn inst(color: usize, shape: Shape, x1: f64, y1: f64, x2: f64, y2: f64) -> Instance {
    Instance {
        color,
        shape,
        bx: RoiBox::new(x1, y1, x2, y2).expect("gallery box"),
    }
}

/// Fixed demo scenes as `(name, height factor, width factor, layout)`;
/// the last one is twice as wide as it is tall.
pub fn scenes() -> Vec<(&'static str, usize, usize, Layout)> {
    use Shape::*;
    vec![
        (
            "pair",
            1,
            1,
            Layout {
                background: 0,
                instances: vec![inst(0, Square, 0.1, 0.3, 0.4, 0.6), inst(2, Circle, 0.55, 0.3, 0.9, 0.65)],
            },
        ),
        (
            "row-of-three",
            1,
            1,
            Layout {
                background: 1,
                instances: vec![
                    inst(3, Triangle, 0.05, 0.35, 0.3, 0.65),
                    inst(4, Square, 0.375, 0.35, 0.625, 0.65),
                    inst(5, Circle, 0.7, 0.35, 0.95, 0.65),
                ],
            },
        ),
        (
            "crowd",
            1,
            1,
            Layout {
                background: 0,
                instances: vec![
                    inst(0, Circle, 0.05, 0.05, 0.3, 0.3),
                    inst(1, Square, 0.4, 0.05, 0.6, 0.25),
                    inst(6, Triangle, 0.7, 0.05, 0.95, 0.35),
                    inst(7, Square, 0.05, 0.6, 0.35, 0.9),
                    inst(2, Triangle, 0.45, 0.5, 0.65, 0.75),
                    inst(3, Circle, 0.72, 0.62, 0.95, 0.92),
                ],
            },
        ),
        (
            "small-and-large",
            1,
            1,
            Layout {
                background: 1,
                instances: vec![inst(1, Circle, 0.1, 0.1, 0.7, 0.7), inst(0, Square, 0.78, 0.78, 0.92, 0.92)],
            },
        ),
        (
            "wide",
            1,
            2,
            Layout {
                background: 0,
                instances: vec![
                    inst(0, Square, 0.04, 0.25, 0.2, 0.7),
                    inst(3, Circle, 0.3, 0.2, 0.48, 0.75),
                    inst(2, Triangle, 0.56, 0.25, 0.74, 0.75),
                    inst(4, Circle, 0.8, 0.3, 0.96, 0.7),
                ],
            },
        ),
    ]
}
