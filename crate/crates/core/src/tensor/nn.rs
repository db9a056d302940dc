//! Per-sample layers for the toy denoiser. Feature maps are `c × h × w`.

use super::{gemm, Scalar, Tensor};
use crate::error::{dim_err, Result};

fn chw<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected c×h×w, got {s:?}");
    (s[0], s[1], s[2])
}

fn im2col<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (c, h, w) = chw(x);
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    let xd = x.data();
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &xd[ci * hw + sy as usize * w..][..w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut x = Tensor::zeros(&[c, h, w]);
    let xd = x.data_mut();
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut xd[ci * hw + sy as usize * w..][..w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `cout × (cin·9)`.
pub fn conv3x3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x);
    let cout = weight.shape()[0];
    if weight.shape() != [cout, c * 9] || bias.shape() != [cout] {
        return Err(dim_err("conv3x3", x.shape(), weight.shape()));
    }
    let cols = im2col(x);
    let hw = h * w;
    let mut out = Tensor::zeros(&[cout, h, w]);
    for (o, row) in out.data_mut().chunks_mut(hw).enumerate() {
        row.fill(bias.data()[o]);
    }
    gemm(cout, c * 9, hw, T::one(), weight.data(), (c * 9, 1), &cols, (hw, 1), T::one(), out.data_mut(), (hw, 1));
    Ok(out)
}

/// Returns (grad_x, grad_weight, grad_bias).
pub fn conv3x3_vjp<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = chw(x);
    let hw = h * w;
    let cout = weight.shape()[0];
    let cols = im2col(x);
    let mut gw = Tensor::zeros(weight.shape());
    gemm(cout, hw, c * 9, T::one(), g.data(), (hw, 1), &cols, (1, hw), T::zero(), gw.data_mut(), (c * 9, 1));
    let mut gcols = vec![T::zero(); c * 9 * hw];
    gemm(c * 9, cout, hw, T::one(), weight.data(), (1, c * 9), g.data(), (hw, 1), T::zero(), &mut gcols, (hw, 1));
    let gb = Tensor::from_vec(&[cout], g.data().chunks(hw).map(|r| r.iter().copied().sum()).collect()).unwrap();
    (col2im(&gcols, c, h, w), gw, gb)
}

/// 2×2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = chw(x);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let q = T::c(0.25);
    let xd = x.data();
    for ci in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let b = ci * h * w + 2 * y * w + 2 * xo;
                out.data_mut()[(ci * ho + y) * wo + xo] = (xd[b] + xd[b + 1] + xd[b + w] + xd[b + w + 1]) * q;
            }
        }
    }
    out
}

pub fn avg_pool2_vjp<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, ho, wo) = chw(g);
    let mut gx = Tensor::zeros(&[c, h, w]);
    let q = T::c(0.25);
    for ci in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let v = g.data()[(ci * ho + y) * wo + xo] * q;
                let b = ci * h * w + 2 * y * w + 2 * xo;
                let d = gx.data_mut();
                d[b] += v;
                d[b + 1] += v;
                d[b + w] += v;
                d[b + w + 1] += v;
            }
        }
    }
    gx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = chw(x);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ci in 0..c {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                out.data_mut()[(ci * 2 * h + y) * 2 * w + xo] = x.data()[(ci * h + y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_vjp<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = chw(g);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h2 {
            for xo in 0..w2 {
                gx.data_mut()[(ci * h + y / 2) * w + xo / 2] += g.data()[(ci * h2 + y) * w2 + xo];
            }
        }
    }
    gx
}

/// Dense layer on a row batch: `x` is `n × in`, `weight` is `out × in`.
pub fn linear<T: Scalar>(x: &[T], n: usize, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Vec<T> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(x.len(), n * inp, "linear: input width");
    let mut y = vec![T::zero(); n * out];
    if let Some(b) = bias {
        for row in y.chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(n, inp, out, T::one(), x, (inp, 1), weight.data(), (1, inp), beta, &mut y, (out, 1));
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_vjp<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &Tensor<T>,
    g: &[T],
    gw: &mut Tensor<T>,
    gb: Option<&mut Tensor<T>>,
) -> Vec<T> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    gemm(out, n, inp, T::one(), g, (1, out), x, (inp, 1), T::one(), gw.data_mut(), (inp, 1));
    if let Some(gb) = gb {
        for row in g.chunks(out) {
            for (b, &v) in gb.data_mut().iter_mut().zip(row) {
                *b += v;
            }
        }
    }
    let mut gx = vec![T::zero(); n * inp];
    gemm(n, out, inp, T::one(), g, (out, 1), weight.data(), (inp, 1), T::zero(), &mut gx, (inp, 1));
    gx
}

/// Sinusoidal embedding of a scalar (timestep) into `dim` features.
pub fn sinusoidal<T: Scalar>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::c((t * freq).sin());
        out[half + i] = T::c((t * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, wd) = chw(x);
        let cout = w.shape()[0];
        let mut out = Tensor::zeros(&[cout, h, wd]);
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[o * c * 9 + ci * 9 + ky * 3 + kx]
                                    * x.data()[(ci * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * wd + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_direct_loop_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 18], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let y = conv3x3(&x, &w, &b).unwrap();
        assert!(y.max_abs_diff(&conv_ref(&x, &w, &b)) < 1e-12);

        let g = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let (gx, gw, gb) = conv3x3_vjp(&x, &w, &g);
        let dx = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng);
        let dw = Tensor::<f64>::randn(&[3, 18], 1.0, &mut rng);
        let db = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let eps = 1e-6;
        let shift = |s: f64| {
            let mut x2 = x.clone();
            x2.axpy(s, &dx).unwrap();
            let mut w2 = w.clone();
            w2.axpy(s, &dw).unwrap();
            let mut b2 = b.clone();
            b2.axpy(s, &db).unwrap();
            conv3x3(&x2, &w2, &b2).unwrap().dot(&g)
        };
        let numeric = (shift(eps) - shift(-eps)) / (2.0 * eps);
        let analytic = gx.dot(&dx) + gw.dot(&dw) + gb.dot(&db);
        assert!((numeric - analytic).abs() < 1e-6 * analytic.abs().max(1.0));
    }

    #[test]
    fn pool_and_upsample_are_adjoint_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 4, 6], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[2, 2, 3], 1.0, &mut rng);
        let lhs = avg_pool2(&x).dot(&g);
        let rhs = x.dot(&avg_pool2_vjp(&g, 4, 6));
        assert!((lhs - rhs).abs() < 1e-12);
        let g2 = Tensor::<f64>::randn(&[2, 8, 12], 1.0, &mut rng);
        let lhs = upsample2(&x).dot(&g2);
        let rhs = x.dot(&upsample2_vjp(&g2));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_vjp_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        let y = linear(x.data(), 3, &w, Some(&b));
        assert!((y[0] - (b.data()[0] + (0..4).map(|i| w.data()[i] * x.data()[i]).sum::<f64>())).abs() < 1e-12);
        let g = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let mut gw = Tensor::zeros(&[2, 4]);
        let mut gb = Tensor::zeros(&[2]);
        let gx = linear_vjp(x.data(), 3, &w, g.data(), &mut gw, Some(&mut gb));
        let dx = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let f = |s: f64| {
            let mut x2 = x.clone();
            x2.axpy(s, &dx).unwrap();
            linear(x2.data(), 3, &w, Some(&b)).iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let num = (f(1e-6) - f(-1e-6)) / 2e-6;
        let ana: f64 = gx.iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((num - ana).abs() < 1e-6);
        assert!((gb.data()[1] - (g.data()[1] + g.data()[3] + g.data()[5])).abs() < 1e-12);
    }
}
