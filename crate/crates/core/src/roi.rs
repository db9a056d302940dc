//! ROI-Align and ROI-Unpool with sub-pixel box coordinates.
//!
//! Coordinate convention, shared by both operations:
//! * a map of extent `len` covers the continuous interval `[0, len)` and
//!   grid point `i` sits at its pixel center `i + 0.5`;
//! * a box edge given as a normalized coordinate `x` sits at `x · len`;
//! * ROI cell `j` of an `r`-cell lattice samples the footprint at
//!   `lo + (j + 0.5)·(hi − lo)/r`, exactly one sample per cell.
//!
//! Align interpolates the feature map bilinearly at every lattice sample
//! (out-of-range neighbours clamp to the edge). Unpool does the reverse: a
//! pixel whose center lies in `[lo, hi)` on both axes is mapped into lattice
//! coordinates and interpolated from the nearest lattice samples; on the
//! outer half-cell ring only one lattice sample exists per axis and it gets
//! the full weight. Every other pixel stays empty (zero, occupancy 0).
//!
//! Both maps are linear; their vjps scatter through the same weights.

use crate::error::{dim_err, Error, Result};
use crate::tensor::ops::Mask;
use crate::tensor::{Scalar, Tensor};

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoiBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if !(ok(x1, x2) && ok(y1, y2)) {
            return Err(Error::InvalidBox(format!("[{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Footprint edges along x and y in pixel units of an `h × w` map.
    pub fn pixel_edges(&self, h: usize, w: usize) -> ((f64, f64), (f64, f64)) {
        (
            (self.x1 * w as f64, self.x2 * w as f64),
            (self.y1 * h as f64, self.y2 * h as f64),
        )
    }

    /// Whether the center of pixel `(py, px)` of an `h × w` map lies in the
    /// half-open footprint.
    pub fn contains_pixel_center(&self, py: usize, px: usize, h: usize, w: usize) -> bool {
        let ((x_lo, x_hi), (y_lo, y_hi)) = self.pixel_edges(h, w);
        inside(px, x_lo, x_hi) && inside(py, y_lo, y_hi)
    }
}

#[inline]
fn inside(p: usize, lo: f64, hi: f64) -> bool {
    let c = p as f64 + 0.5;
    lo <= c && c < hi
}

/// Fixed-capacity ROI slots per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiBoxBatch {
    batch: usize,
    capacity: usize,
    boxes: Vec<RoiBox>,
    valid: Vec<bool>,
}

impl RoiBoxBatch {
    pub fn new(batch: usize, capacity: usize) -> Self {
        Self {
            batch,
            capacity,
            boxes: vec![RoiBox::full(); batch * capacity],
            valid: vec![false; batch * capacity],
        }
    }

    /// One batch element holding exactly `boxes`.
    pub fn single(boxes: &[RoiBox]) -> Self {
        let mut b = Self::new(1, boxes.len().max(1));
        for (i, bx) in boxes.iter().enumerate() {
            b.set(0, i, *bx);
        }
        b
    }

    pub fn set(&mut self, b: usize, slot: usize, bx: RoiBox) {
        self.boxes[b * self.capacity + slot] = bx;
        self.valid[b * self.capacity + slot] = true;
    }

    pub fn clear(&mut self, b: usize, slot: usize) {
        self.valid[b * self.capacity + slot] = false;
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, b: usize, slot: usize) -> Option<&RoiBox> {
        let i = b * self.capacity + slot;
        self.valid[i].then(|| &self.boxes[i])
    }

    pub fn is_valid(&self, b: usize, slot: usize) -> bool {
        self.valid[b * self.capacity + slot]
    }

    pub fn valid_count(&self, b: usize) -> usize {
        (0..self.capacity).filter(|&s| self.is_valid(b, s)).count()
    }
}

/// `b × n × c × r × r` cropped features.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeatureStack<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> RoiFeatureStack<T> {
    pub fn side(&self) -> usize {
        self.data.shape()[4]
    }
}

/// `b × n × 1 × h × w` per-ROI validity of unpooled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMask<T> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> OccupancyMask<T> {
    pub fn is_occupied(&self, b: usize, slot: usize, pixel: usize) -> bool {
        let s = self.weights.shape();
        let hw = s[3] * s[4];
        self.weights.data()[(b * s[1] + slot) * hw + pixel] > T::zero()
    }
}

/// One interpolation tap: flat source index and weight.
pub type Tap = (usize, f64);

/// Up to four taps of one output entry, sorted by source index.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub n: usize,
    pub taps: [Tap; 4],
}

impl Taps {
    pub fn as_slice(&self) -> &[Tap] {
        &self.taps[..self.n]
    }
}

/// Taps along one axis, sorted by index, at most two.
#[derive(Clone, Copy, Debug)]
struct Taps1 {
    n: usize,
    taps: [Tap; 2],
}

fn align_taps_1d(j: usize, r: usize, lo: f64, hi: f64, len: usize) -> Taps1 {
    let x = lo + ((j as f64 + 0.5) * (hi - lo)) / r as f64;
    let u = x - 0.5;
    let i0 = u.floor();
    let f = u - i0;
    let clamp = |i: f64| i.max(0.0).min((len - 1) as f64) as usize;
    let (a, b) = (clamp(i0), clamp(i0 + 1.0));
    if a == b {
        Taps1 {
            n: 1,
            taps: [(a, (1.0 - f) + f), (0, 0.0)],
        }
    } else {
        Taps1 {
            n: 2,
            taps: [(a, 1.0 - f), (b, f)],
        }
    }
}

fn unpool_taps_1d(p: usize, r: usize, lo: f64, hi: f64) -> Taps1 {
    let c = p as f64 + 0.5;
    let v = ((c - lo) * r as f64) / (hi - lo) - 0.5;
    let j0 = v.floor();
    let f = v - j0;
    let last = (r - 1) as f64;
    let lo_ok = j0 >= 0.0;
    let hi_ok = j0 + 1.0 <= last;
    match (lo_ok, hi_ok) {
        (true, true) => Taps1 {
            n: 2,
            taps: [(j0 as usize, 1.0 - f), (j0 as usize + 1, f)],
        },
        // Outer ring: the single available sample takes the renormalized
        // weight w / w = 1.
        (true, false) => Taps1 {
            n: 1,
            taps: [(j0 as usize, 1.0), (0, 0.0)],
        },
        (false, true) => Taps1 {
            n: 1,
            taps: [(0, 1.0), (0, 0.0)],
        },
        (false, false) => unreachable!("pixel center inside the footprint maps outside the lattice hull"),
    }
}

fn combine(ys: &Taps1, xs: &Taps1, row_len: usize) -> Taps {
    let mut out = Taps {
        n: 0,
        taps: [(0, 0.0); 4],
    };
    for &(iy, wy) in &ys.taps[..ys.n] {
        for &(ix, wx) in &xs.taps[..xs.n] {
            out.taps[out.n] = (iy * row_len + ix, wy * wx);
            out.n += 1;
        }
    }
    out
}

/// Align stencil for one box: `r·r` rows (raster order) of taps into an
/// `h × w` map.
pub fn align_stencil(bx: &RoiBox, r: usize, h: usize, w: usize) -> Vec<Taps> {
    let ((x_lo, x_hi), (y_lo, y_hi)) = bx.pixel_edges(h, w);
    let xs: Vec<Taps1> = (0..r).map(|j| align_taps_1d(j, r, x_lo, x_hi, w)).collect();
    let ys: Vec<Taps1> = (0..r).map(|i| align_taps_1d(i, r, y_lo, y_hi, h)).collect();
    let mut out = Vec::with_capacity(r * r);
    for ty in &ys {
        for tx in &xs {
            out.push(combine(ty, tx, w));
        }
    }
    out
}

/// Unpool stencil for one box: occupied pixel index plus taps into the
/// `r × r` lattice, pixels in raster order.
pub fn unpool_stencil(bx: &RoiBox, r: usize, h: usize, w: usize) -> Vec<(usize, Taps)> {
    let ((x_lo, x_hi), (y_lo, y_hi)) = bx.pixel_edges(h, w);
    let cols: Vec<(usize, Taps1)> = inside_range(x_lo, x_hi, w)
        .map(|px| (px, unpool_taps_1d(px, r, x_lo, x_hi)))
        .collect();
    let mut out = Vec::with_capacity(cols.len() * inside_range(y_lo, y_hi, h).len());
    for py in inside_range(y_lo, y_hi, h) {
        let ty = unpool_taps_1d(py, r, y_lo, y_hi);
        for (px, tx) in &cols {
            out.push((py * w + px, combine(&ty, tx, r)));
        }
    }
    out
}

/// Pixel indices whose centers fall inside `[lo, hi)`, found without
/// scanning the whole axis.
fn inside_range(lo: f64, hi: f64, len: usize) -> std::ops::Range<usize> {
    let guess = (lo - 0.5).ceil().max(0.0) as usize;
    let mut a = guess.saturating_sub(1);
    while a < len && !inside(a, lo, hi) && (a as f64 + 0.5) < lo {
        a += 1;
    }
    if a >= len || !inside(a, lo, hi) {
        return 0..0;
    }
    let mut b = ((hi - 0.5).ceil().max(0.0) as usize).min(len).max(a);
    while b > a && !inside(b - 1, lo, hi) {
        b -= 1;
    }
    while b < len && inside(b, lo, hi) {
        b += 1;
    }
    a..b
}

/// Number of pixels whose centers lie inside the box footprint.
pub fn footprint_area(bx: &RoiBox, h: usize, w: usize) -> usize {
    let ((x_lo, x_hi), (y_lo, y_hi)) = bx.pixel_edges(h, w);
    inside_range(x_lo, x_hi, w).len() * inside_range(y_lo, y_hi, h).len()
}

/// ROI-Align of a single `c × h × w` map for one box into `out` (`c × r × r`).
pub fn align_into<T: Scalar>(feature: &[T], c: usize, h: usize, w: usize, bx: &RoiBox, r: usize, out: &mut [T]) {
    let stencil = align_stencil(bx, r, h, w);
    let (hw, rr) = (h * w, r * r);
    let weights: Vec<[T; 4]> = stencil.iter().map(|t| t.taps.map(|(_, wt)| T::c(wt))).collect();
    for ch in 0..c {
        let src = &feature[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * rr..(ch + 1) * rr];
        for (cell, (t, wts)) in stencil.iter().zip(&weights).enumerate() {
            let mut acc = T::zero();
            for k in 0..t.n {
                acc += wts[k] * src[t.taps[k].0];
            }
            dst[cell] = acc;
        }
    }
}

/// vjp of [`align_into`]: adds the scattered gradient into `grad_feature`.
pub fn align_vjp_into<T: Scalar>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    bx: &RoiBox,
    r: usize,
    grad_feature: &mut [T],
) {
    let stencil = align_stencil(bx, r, h, w);
    let (hw, rr) = (h * w, r * r);
    for ch in 0..c {
        let g = &grad_out[ch * rr..(ch + 1) * rr];
        let dst = &mut grad_feature[ch * hw..(ch + 1) * hw];
        for (cell, t) in stencil.iter().enumerate() {
            for &(idx, wt) in t.as_slice() {
                dst[idx] += T::c(wt) * g[cell];
            }
        }
    }
}

/// ROI-Unpool of one `c × r × r` ROI into a zeroed `c × h × w` buffer.
/// Returns the occupied pixel indices in raster order.
pub fn unpool_into<T: Scalar>(roi: &[T], c: usize, r: usize, bx: &RoiBox, h: usize, w: usize, out: &mut [T]) -> Vec<usize> {
    let stencil = unpool_stencil(bx, r, h, w);
    let (hw, rr) = (h * w, r * r);
    let weights: Vec<[T; 4]> = stencil.iter().map(|(_, t)| t.taps.map(|(_, wt)| T::c(wt))).collect();
    for ch in 0..c {
        let src = &roi[ch * rr..(ch + 1) * rr];
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        for ((pix, t), wts) in stencil.iter().zip(&weights) {
            let mut acc = T::zero();
            for k in 0..t.n {
                acc += wts[k] * src[t.taps[k].0];
            }
            dst[*pix] = acc;
        }
    }
    stencil.into_iter().map(|(p, _)| p).collect()
}

#[allow(clippy::too_many_arguments)]
fn unpool_vjp_signed<T: Scalar>(
    grad_out: &[T],
    c: usize,
    r: usize,
    bx: &RoiBox,
    h: usize,
    w: usize,
    grad_roi: &mut [T],
    sign: f64,
) {
    let stencil = unpool_stencil(bx, r, h, w);
    let (hw, rr) = (h * w, r * r);
    for ch in 0..c {
        let g = &grad_out[ch * hw..(ch + 1) * hw];
        let dst = &mut grad_roi[ch * rr..(ch + 1) * rr];
        for (pix, t) in &stencil {
            for &(idx, wt) in t.as_slice() {
                dst[idx] += T::c(sign * wt) * g[*pix];
            }
        }
    }
}

/// vjp of [`unpool_into`]: adds into `grad_roi` (`c × r × r`).
pub fn unpool_vjp_into<T: Scalar>(grad_out: &[T], c: usize, r: usize, bx: &RoiBox, h: usize, w: usize, grad_roi: &mut [T]) {
    unpool_vjp_signed(grad_out, c, r, bx, h, w, grad_roi, 1.0)
}

fn check_feature<T: Scalar>(feature: &Tensor<T>, boxes: &RoiBoxBatch) -> Result<(usize, usize, usize, usize)> {
    let s = feature.shape();
    if s.len() != 4 || s[0] != boxes.batch() {
        return Err(dim_err("roi feature", s, &[boxes.batch(), boxes.capacity()]));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Crops every valid ROI of `feature` (`b × c × h × w`) to an `r × r` grid.
pub fn roi_align<T: Scalar>(feature: &Tensor<T>, boxes: &RoiBoxBatch, r: usize) -> Result<RoiFeatureStack<T>> {
    if r == 0 {
        return Err(Error::Param("ROI side r must be at least 1".into()));
    }
    let (b, c, h, w) = check_feature(feature, boxes)?;
    let n = boxes.capacity();
    let mut out = Tensor::zeros(&[b, n, c, r, r]);
    let per = c * r * r;
    for bi in 0..b {
        for s in 0..n {
            if let Some(bx) = boxes.get(bi, s) {
                let dst = &mut out.data_mut()[(bi * n + s) * per..][..per];
                align_into(feature.slab(bi), c, h, w, bx, r, dst);
            }
        }
    }
    Ok(RoiFeatureStack { data: out })
}

/// vjp of [`roi_align`] with respect to the feature map. Each ROI's
/// contribution is formed separately and then summed in slot order.
pub fn roi_align_vjp<T: Scalar>(grad: &RoiFeatureStack<T>, boxes: &RoiBoxBatch, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = grad.data.shape();
    let (b, n, c, r) = (s[0], s[1], s[2], s[3]);
    if b != boxes.batch() || n != boxes.capacity() {
        return Err(dim_err("roi_align_vjp", s, &[boxes.batch(), boxes.capacity()]));
    }
    let mut gx = Tensor::zeros(&[b, c, h, w]);
    let mut scratch = vec![T::zero(); c * h * w];
    let per = c * r * r;
    for bi in 0..b {
        for slot in 0..n {
            if let Some(bx) = boxes.get(bi, slot) {
                scratch.fill(T::zero());
                align_vjp_into(&grad.data.data()[(bi * n + slot) * per..][..per], c, h, w, bx, r, &mut scratch);
                for (d, &v) in gx.slab_mut(bi).iter_mut().zip(&scratch) {
                    *d += v;
                }
            }
        }
    }
    Ok(gx)
}

/// Pastes every valid ROI back onto an `h × w` canvas. Returns the
/// `b × n × c × h × w` instance map and its occupancy.
pub fn roi_unpool<T: Scalar>(
    roi: &RoiFeatureStack<T>,
    boxes: &RoiBoxBatch,
    h: usize,
    w: usize,
) -> Result<(Tensor<T>, OccupancyMask<T>)> {
    if h == 0 || w == 0 {
        return Err(Error::Param(format!("unpool target {h}×{w} must be non-empty")));
    }
    let s = roi.data.shape();
    let (b, n, c, r) = (s[0], s[1], s[2], s[3]);
    if b != boxes.batch() || n != boxes.capacity() || s[4] != r {
        return Err(dim_err("roi_unpool", s, &[boxes.batch(), boxes.capacity()]));
    }
    let mut out = Tensor::zeros(&[b, n, c, h, w]);
    let mut occ = Tensor::zeros(&[b, n, 1, h, w]);
    let (per_in, per_out) = (c * r * r, c * h * w);
    for bi in 0..b {
        for slot in 0..n {
            if let Some(bx) = boxes.get(bi, slot) {
                let k = bi * n + slot;
                let src = &roi.data.data()[k * per_in..][..per_in];
                let dst = &mut out.data_mut()[k * per_out..][..per_out];
                let pix = unpool_into(src, c, r, bx, h, w, dst);
                let o = &mut occ.data_mut()[k * h * w..][..h * w];
                for p in pix {
                    o[p] = T::one();
                }
            }
        }
    }
    Ok((out, OccupancyMask { weights: occ }))
}

fn unpool_vjp_impl<T: Scalar>(grad: &Tensor<T>, boxes: &RoiBoxBatch, r: usize, sign: f64) -> Result<RoiFeatureStack<T>> {
    let s = grad.shape();
    if s.len() != 5 || s[0] != boxes.batch() || s[1] != boxes.capacity() {
        return Err(dim_err("roi_unpool_vjp", s, &[boxes.batch(), boxes.capacity()]));
    }
    let (b, n, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = Tensor::zeros(&[b, n, c, r, r]);
    let (per_in, per_out) = (c * h * w, c * r * r);
    for bi in 0..b {
        for slot in 0..n {
            if let Some(bx) = boxes.get(bi, slot) {
                let k = bi * n + slot;
                unpool_vjp_signed(
                    &grad.data()[k * per_in..][..per_in],
                    c,
                    r,
                    bx,
                    h,
                    w,
                    &mut out.data_mut()[k * per_out..][..per_out],
                    sign,
                );
            }
        }
    }
    Ok(RoiFeatureStack { data: out })
}

/// vjp of [`roi_unpool`] with respect to the ROI stack.
pub fn roi_unpool_vjp<T: Scalar>(grad: &Tensor<T>, boxes: &RoiBoxBatch, r: usize) -> Result<RoiFeatureStack<T>> {
    unpool_vjp_impl(grad, boxes, r, 1.0)
}

/// Mutation fixture for the verification suite: unpool vjp with every
/// weight negated.
#[doc(hidden)]
pub fn roi_unpool_vjp_sign_flipped<T: Scalar>(grad: &Tensor<T>, boxes: &RoiBoxBatch, r: usize) -> Result<RoiFeatureStack<T>> {
    unpool_vjp_impl(grad, boxes, r, -1.0)
}

/// Box edges rounded to the nearest integer pixel, as used by attention-mask
/// injection. Column `px` is inside when `round(x1·w) ≤ px < round(x2·w)`.
pub fn quantized_mask(boxes: &RoiBoxBatch, h: usize, w: usize) -> Mask {
    let (b, n) = (boxes.batch(), boxes.capacity());
    let mut data = vec![false; b * n * h * w];
    for bi in 0..b {
        for slot in 0..n {
            if let Some(bx) = boxes.get(bi, slot) {
                let (cx, cy) = quantized_edges(bx, h, w);
                let plane = &mut data[(bi * n + slot) * h * w..][..h * w];
                for y in cy.0..cy.1 {
                    plane[y * w + cx.0..y * w + cx.1].fill(true);
                }
            }
        }
    }
    Mask {
        shape: vec![b, n, 1, h, w],
        data,
    }
}

/// Integer column and row ranges of the quantized box.
pub fn quantized_edges(bx: &RoiBox, h: usize, w: usize) -> ((usize, usize), (usize, usize)) {
    let q = |v: f64, len: usize| (v * len as f64).round().clamp(0.0, len as f64) as usize;
    ((q(bx.x1, w), q(bx.x2, w)), (q(bx.y1, h), q(bx.y2, h)))
}
