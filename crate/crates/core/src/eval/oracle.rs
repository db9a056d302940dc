//! Explicit interpolation matrices for ROI-Align and ROI-Unpool, built with
//! plain scalar loops from per-axis 1-D matrices. Used to verify `roi`.

use crate::error::{Error, Result};
use crate::roi::RoiBox;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    /// `M · v`, accumulated left to right from zero.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..self.cols {
                    acc += self.at(i, j) * v[j];
                }
                acc
            })
            .collect()
    }

    /// `Mᵀ · v`, accumulated over rows in order from zero.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        (0..self.cols)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..self.rows {
                    acc += self.at(i, j) * v[i];
                }
                acc
            })
            .collect()
    }

    /// Kronecker product `self ⊗ other`.
    fn kron(&self, other: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows * other.rows, self.cols * other.cols);
        for a in 0..self.rows {
            for b in 0..other.rows {
                for c in 0..self.cols {
                    for d in 0..other.cols {
                        out.data[(a * other.rows + b) * out.cols + c * other.cols + d] = self.at(a, c) * other.at(b, d);
                    }
                }
            }
        }
        out
    }
}

/// Largest `r²·h·w` the oracle will materialize.
pub const DEFAULT_BUDGET: usize = 1 << 22;

/// 1-D sampling matrix (`r × len`) for the cell centers of `[lo, hi)`.
fn sample_matrix(r: usize, lo: f64, hi: f64, len: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(r, len);
    let last = len as isize - 1;
    for j in 0..r {
        let pos = lo + ((j as f64 + 0.5) * (hi - lo)) / r as f64;
        let grid = pos - 0.5;
        let left = grid.floor();
        let frac = grid - left;
        let i0 = (left as isize).clamp(0, last) as usize;
        let i1 = (left as isize + 1).clamp(0, last) as usize;
        m.add(j, i0, 1.0 - frac);
        m.add(j, i1, frac);
    }
    m
}

/// 1-D paste-back matrix (`len × r`): rows for pixels whose center is inside
/// `[lo, hi)` interpolate between lattice samples, renormalizing when only
/// one neighbour exists; other rows are zero.
fn paste_matrix(r: usize, lo: f64, hi: f64, len: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(len, r);
    for p in 0..len {
        let center = p as f64 + 0.5;
        if !(lo <= center && center < hi) {
            continue;
        }
        let lattice = ((center - lo) * r as f64) / (hi - lo) - 0.5;
        let left = lattice.floor();
        let frac = lattice - left;
        let cands = [(left as isize, 1.0 - frac), (left as isize + 1, frac)];
        let avail: Vec<(usize, f64)> = cands
            .iter()
            .filter(|(j, _)| *j >= 0 && (*j as usize) < r)
            .map(|&(j, w)| (j as usize, w))
            .collect();
        if avail.len() == 2 {
            for (j, w) in avail {
                m.add(p, j, w);
            }
        } else {
            let total: f64 = avail.iter().map(|(_, w)| w).sum();
            assert!(total > 0.0, "empty interpolation support inside footprint");
            for (j, w) in avail {
                m.add(p, j, w / total);
            }
        }
    }
    m
}

/// Dense align matrix `S` (`r² × h·w`) and unpool matrix `U` (`h·w × r²`)
/// for one box.
pub fn dense_oracle_matrices(bx: &RoiBox, r: usize, h: usize, w: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    dense_oracle_matrices_budget(bx, r, h, w, DEFAULT_BUDGET)
}

pub fn dense_oracle_matrices_budget(
    bx: &RoiBox,
    r: usize,
    h: usize,
    w: usize,
    budget: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let size = r * r * h * w;
    if size > budget {
        return Err(Error::Param(format!("oracle matrix of {size} entries exceeds budget {budget}")));
    }
    if r == 0 || h == 0 || w == 0 {
        return Err(Error::Param("oracle extents must be positive".into()));
    }
    let (x_lo, x_hi) = (bx.x1 * w as f64, bx.x2 * w as f64);
    let (y_lo, y_hi) = (bx.y1 * h as f64, bx.y2 * h as f64);
    let s = sample_matrix(r, y_lo, y_hi, h).kron(&sample_matrix(r, x_lo, x_hi, w));
    let u = paste_matrix(r, y_lo, y_hi, h).kron(&paste_matrix(r, x_lo, x_hi, w));
    Ok((s, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::{roi_align, roi_align_vjp, roi_unpool, roi_unpool_vjp, RoiBoxBatch, RoiFeatureStack};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_box_identity_and_row_sums() {
        let (s, u) = dense_oracle_matrices(&RoiBox::full(), 4, 4, 4).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(s.at(i, j), if i == j { 1.0 } else { 0.0 });
                assert_eq!(u.at(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let bx = RoiBox::new(0.1, 0.27, 0.93, 0.6).unwrap();
        let (s, _) = dense_oracle_matrices(&bx, 5, 7, 9).unwrap();
        for i in 0..s.rows {
            let sum: f64 = (0..s.cols).map(|j| s.at(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_enforced() {
        assert!(matches!(
            dense_oracle_matrices_budget(&RoiBox::full(), 10, 10, 10, 9_999),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn roi_ops_equal_dense_products_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let h = rng.gen_range(1..10);
            let w = rng.gen_range(1..10);
            let r = rng.gen_range(1..7);
            let c = rng.gen_range(1..3);
            let x1 = rng.gen_range(0.0..0.9);
            let y1 = rng.gen_range(0.0..0.9);
            let bx = RoiBox::new(x1, y1, rng.gen_range(x1 + 0.02..=1.0), rng.gen_range(y1 + 0.02..=1.0)).unwrap();
            let boxes = RoiBoxBatch::single(&[bx]);
            let (s, u) = dense_oracle_matrices(&bx, r, h, w).unwrap();

            let x = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
            let roi = roi_align(&x, &boxes, r).unwrap();
            let groi = RoiFeatureStack {
                data: Tensor::<f64>::randn(&[1, 1, c, r, r], 1.0, &mut rng),
            };
            let gx = roi_align_vjp(&groi, &boxes, h, w).unwrap();
            let (up, _) = roi_unpool(&groi, &boxes, h, w).unwrap();
            let gup = Tensor::<f64>::randn(&[1, 1, c, h, w], 1.0, &mut rng);
            let gr = roi_unpool_vjp(&gup, &boxes, r).unwrap();
            for ch in 0..c {
                let xs = &x.data()[ch * h * w..][..h * w];
                let ys = &groi.data.data()[ch * r * r..][..r * r];
                assert_eq!(&roi.data.data()[ch * r * r..][..r * r], s.apply(xs).as_slice());
                assert_eq!(&gx.data()[ch * h * w..][..h * w], s.apply_transpose(ys).as_slice());
                assert_eq!(&up.data()[ch * h * w..][..h * w], u.apply(ys).as_slice());
                let gs = &gup.data()[ch * h * w..][..h * w];
                assert_eq!(&gr.data.data()[ch * r * r..][..r * r], u.apply_transpose(gs).as_slice());
            }
        }
    }
}
