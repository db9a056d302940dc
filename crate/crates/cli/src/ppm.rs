use std::path::Path;

use roictrl_core::{Scalar, Tensor};

/// Binary PPM (P6) of a `3 × h × w` image in `[-1, 1]`.
pub fn encode<T: Scalar>(img: &Tensor<T>) -> Vec<u8> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            let v = (img.data()[c * h * w + p].f64() + 1.0) * 127.5;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write<T: Scalar>(path: &Path, img: &Tensor<T>) -> std::io::Result<()> {
    std::fs::write(path, encode(img))
}

/// Several images side by side, separated by a 2-pixel gray gutter.
pub fn strip<T: Scalar>(images: &[&Tensor<T>]) -> Tensor<T> {
    let h = images.iter().map(|i| i.shape()[1]).max().unwrap_or(0);
    let gap = 2;
    let w: usize = images.iter().map(|i| i.shape()[2]).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut out = Tensor::full(&[3, h, w], T::c(0.0));
    let mut x0 = 0;
    for img in images {
        let (ih, iw) = (img.shape()[1], img.shape()[2]);
        for c in 0..3 {
            for y in 0..ih {
                for x in 0..iw {
                    out.data_mut()[(c * h + y) * w + x0 + x] = img.data()[(c * ih + y) * iw + x];
                }
            }
        }
        x0 += iw + gap;
    }
    out
}
