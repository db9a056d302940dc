use super::{gemm, DiffOp, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Boolean tensor used as a softmax validity mask (`true` = keep).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(dim_err("mask", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn all(shape: &[usize], value: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` when broadcast to `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output multi-index, yielding flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| dim_err(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut res = Tensor::zeros(&out);
    let (ad, bd) = (a.data(), b.data());
    let rd = res.data_mut();
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| rd[o] = f(ad[ia], bd[ib]));
    Ok(res)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let s = broadcast_strides(shape, out);
    let mut res = Tensor::zeros(shape);
    let gd = grad.data();
    let rd = res.data_mut();
    for_each_broadcast(out, &s, &vec![0; out.len()], |o, i, _| rd[i] += gd[o]);
    res
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn add_vjp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (reduce_to(g, a.shape()), reduce_to(g, b.shape()))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn mul_vjp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let ga = binary("mul_vjp", g, b, |x, y| x * y)?;
    let gb = binary("mul_vjp", g, a, |x, y| x * y)?;
    Ok((reduce_to(&ga, a.shape()), reduce_to(&gb, b.shape())))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[inline]
pub fn silu_scalar<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

#[inline]
pub fn silu_grad_scalar<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub fn silu_vjp<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| gv * silu_grad_scalar(v))
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(dim_err("matmul", a, b));
    }
    let batch_a = &a[..a.len() - 2];
    let batch_b = &b[..b.len() - 2];
    let shared_b = batch_b.is_empty();
    if !shared_b && batch_a != batch_b {
        return Err(dim_err("matmul", a, b));
    }
    Ok((batch_a.iter().product(), m, k, n, shared_b))
}

/// Batched matrix product over the leading extents. `b` may be rank 2 and
/// shared across every batch entry of `a`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n, shared_b) = matmul_dims(a.shape(), b.shape())?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = Tensor::zeros(&shape);
    for i in 0..batch {
        let bs = if shared_b { 0 } else { i * k * n };
        gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * m * k..(i + 1) * m * k],
            (k, 1),
            &b.data()[bs..bs + k * n],
            (n, 1),
            T::zero(),
            &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            (n, 1),
        );
    }
    Ok(out)
}

pub fn matmul_vjp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n, shared_b) = matmul_dims(a.shape(), b.shape())?;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for i in 0..batch {
        let bs = if shared_b { 0 } else { i * k * n };
        let gs = &g.data()[i * m * n..(i + 1) * m * n];
        // ga = g · bᵀ
        gemm(
            m,
            n,
            k,
            T::one(),
            gs,
            (n, 1),
            &b.data()[bs..bs + k * n],
            (1, n),
            T::zero(),
            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
            (k, 1),
        );
        // gb += aᵀ · g
        let beta = if shared_b && i > 0 { T::one() } else { T::zero() };
        gemm(
            k,
            m,
            n,
            T::one(),
            &a.data()[i * m * k..(i + 1) * m * k],
            (1, k),
            gs,
            (n, 1),
            beta,
            &mut gb.data_mut()[bs..bs + k * n],
            (n, 1),
        );
    }
    Ok((ga, gb))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`. Masked-out entries (mask `false`) get exactly zero
/// probability; their logits are treated as the most negative finite value.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize, mask: Option<&Mask>) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Param(format!("softmax axis {axis} for rank {}", x.rank())));
    }
    let mask_strides = match mask {
        Some(m) => {
            if m.shape.len() != x.rank() || m.shape.iter().zip(x.shape()).any(|(&a, &b)| a != b && a != 1) {
                return Err(dim_err("softmax mask", x.shape(), &m.shape));
            }
            Some(broadcast_strides(&m.shape, x.shape()))
        }
        None => None,
    };
    let xs = strides(x.shape());
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    let mut keep = vec![true; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            if let (Some(m), Some(ms)) = (mask, &mask_strides) {
                // Offset of this slice in the mask, via the multi-index of `base`.
                let mut rem = base;
                let mut mbase = 0;
                for d in 0..x.rank() {
                    let id = rem / xs[d];
                    rem %= xs[d];
                    mbase += id * ms[d];
                }
                for (a, k) in keep.iter_mut().enumerate() {
                    *k = m.data[mbase + a * ms[axis]];
                }
            }
            let mut max = T::min_value();
            let mut any = false;
            for a in 0..len {
                if keep[a] {
                    any = true;
                    max = max.max(xd[base + a * inner]);
                }
            }
            if !any {
                return Err(Error::FullyMasked(base));
            }
            let mut sum = T::zero();
            for a in 0..len {
                let idx = base + a * inner;
                if keep[a] {
                    let e = (xd[idx] - max).exp();
                    od[idx] = e;
                    sum += e;
                }
            }
            for a in 0..len {
                od[base + a * inner] /= sum;
            }
        }
    }
    Ok(out)
}

/// Gradient of softmax given its output `y`; masked entries receive zero.
pub fn softmax_vjp<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), g.data());
    let xd = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot += yd[base + a * inner] * gd[base + a * inner];
            }
            for a in 0..len {
                let idx = base + a * inner;
                xd[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    gx
}

/// Row-wise softmax on a contiguous `rows × cols` buffer, in place.
pub(crate) fn softmax_rows_inplace<T: Scalar>(buf: &mut [T], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::min_value(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise softmax vjp on contiguous buffers, in place on `g`.
pub(crate) fn softmax_rows_vjp_inplace<T: Scalar>(p: &[T], g: &mut [T], cols: usize) {
    for (prow, grow) in p.chunks(cols).zip(g.chunks_mut(cols)) {
        let mut dot = T::zero();
        for (&pv, &gv) in prow.iter().zip(grow.iter()) {
            dot += pv * gv;
        }
        for (pv, gv) in prow.iter().zip(grow.iter_mut()) {
            *gv = *pv * (*gv - dot);
        }
    }
}

/// Normalizes every slice along `axis` to zero mean and unit variance (no
/// affine). Returns the output and the per-slice inverse standard deviation.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, axis: usize, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    if axis >= x.rank() {
        return Err(Error::Param(format!("layer_norm axis {axis} for rank {}", x.rank())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); outer * inner];
    let n = T::c(len as f64);
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = T::zero();
            for a in 0..len {
                mean += xd[base + a * inner];
            }
            mean /= n;
            let mut var = T::zero();
            for a in 0..len {
                let d = xd[base + a * inner] - mean;
                var += d * d;
            }
            var /= n;
            let is = T::one() / (var + T::c(eps)).sqrt();
            inv_std[o * inner + i] = is;
            for a in 0..len {
                od[base + a * inner] = (xd[base + a * inner] - mean) * is;
            }
        }
    }
    Ok((out, inv_std))
}

pub fn layer_norm_vjp<T: Scalar>(y: &Tensor<T>, inv_std: &[T], g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let n = T::c(len as f64);
    let (yd, gd) = (y.data(), g.data());
    let xd = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mg = T::zero();
            let mut mgy = T::zero();
            for a in 0..len {
                let idx = base + a * inner;
                mg += gd[idx];
                mgy += gd[idx] * yd[idx];
            }
            mg /= n;
            mgy /= n;
            let is = inv_std[o * inner + i];
            for a in 0..len {
                let idx = base + a * inner;
                xd[idx] = is * (gd[idx] - mg - yd[idx] * mgy);
            }
        }
    }
    gx
}

/// Per-pixel linear map over channels: `x` is b×cin×h×w, `weight` cout×cin,
/// `bias` cout.
pub fn conv1x1<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, cin, hw) = conv1x1_dims(x, weight, bias)?;
    let cout = weight.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[1] = cout;
    let mut out = Tensor::zeros(&shape);
    // Plain channel-ordered accumulation: each output equals the scalar dot
    // product `bias + Σ_c w[o,c]·x[c]` bit for bit.
    for bi in 0..b {
        let src = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        let dst = &mut out.data_mut()[bi * cout * hw..(bi + 1) * cout * hw];
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[o]);
            for (ci, xrow) in src.chunks(hw).enumerate() {
                let wv = weight.data()[o * cin + ci];
                for (d, &xv) in row.iter_mut().zip(xrow) {
                    *d += wv * xv;
                }
            }
        }
    }
    Ok(out)
}

fn conv1x1_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 || weight.rank() != 2 || bias.rank() != 1 {
        return Err(dim_err("conv1x1", x.shape(), weight.shape()));
    }
    let cin = x.shape()[1];
    if weight.shape()[1] != cin || bias.shape()[0] != weight.shape()[0] {
        return Err(dim_err("conv1x1", x.shape(), weight.shape()));
    }
    Ok((x.shape()[0], cin, x.shape()[2] * x.shape()[3]))
}

pub fn conv1x1_vjp<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, cin, hw) = conv1x1_dims(x, weight, bias)?;
    let cout = weight.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(bias.shape());
    for bi in 0..b {
        let gs = &g.data()[bi * cout * hw..(bi + 1) * cout * hw];
        gemm(
            cin,
            cout,
            hw,
            T::one(),
            weight.data(),
            (1, cin),
            gs,
            (hw, 1),
            T::zero(),
            &mut gx.data_mut()[bi * cin * hw..(bi + 1) * cin * hw],
            (hw, 1),
        );
        gemm(
            cout,
            hw,
            cin,
            T::one(),
            gs,
            (hw, 1),
            &x.data()[bi * cin * hw..(bi + 1) * cin * hw],
            (1, hw),
            T::one(),
            gw.data_mut(),
            (cin, 1),
        );
        for (o, row) in gs.chunks(hw).enumerate() {
            gb.data_mut()[o] += row.iter().copied().sum::<T>();
        }
    }
    Ok((gx, gw, gb))
}

/// `DiffOp` adaptors so the generic gradient checker can drive every op.
pub mod diff {
    use super::*;

    pub struct MatMul;
    pub struct Softmax {
        pub axis: usize,
        pub mask: Option<Mask>,
    }
    pub struct Conv1x1;
    pub struct Add;
    pub struct Mul;
    pub struct Scale(pub f64);
    pub struct Silu;
    pub struct LayerNorm {
        pub axis: usize,
    }

    impl<T: Scalar> DiffOp<T> for MatMul {
        fn name(&self) -> &str {
            "matmul"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            matmul(i[0], i[1])
        }
        fn vjp(&self, i: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let (a, b) = matmul_vjp(i[0], i[1], g)?;
            Ok(vec![a, b])
        }
    }

    impl<T: Scalar> DiffOp<T> for Softmax {
        fn name(&self) -> &str {
            "softmax"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            softmax(i[0], self.axis, self.mask.as_ref())
        }
        fn vjp(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            Ok(vec![softmax_vjp(y, g, self.axis)])
        }
    }

    impl<T: Scalar> DiffOp<T> for Conv1x1 {
        fn name(&self) -> &str {
            "conv1x1"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            conv1x1(i[0], i[1], i[2])
        }
        fn vjp(&self, i: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let (a, b, c) = conv1x1_vjp(i[0], i[1], i[2], g)?;
            Ok(vec![a, b, c])
        }
    }

    impl<T: Scalar> DiffOp<T> for Add {
        fn name(&self) -> &str {
            "add"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            add(i[0], i[1])
        }
        fn vjp(&self, i: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let (a, b) = add_vjp(i[0], i[1], g);
            Ok(vec![a, b])
        }
    }

    impl<T: Scalar> DiffOp<T> for Mul {
        fn name(&self) -> &str {
            "mul"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            mul(i[0], i[1])
        }
        fn vjp(&self, i: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let (a, b) = mul_vjp(i[0], i[1], g)?;
            Ok(vec![a, b])
        }
    }

    impl<T: Scalar> DiffOp<T> for Scale {
        fn name(&self) -> &str {
            "scale"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(scale(i[0], T::c(self.0)))
        }
        fn vjp(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            Ok(vec![scale(g, T::c(self.0))])
        }
    }

    impl<T: Scalar> DiffOp<T> for Silu {
        fn name(&self) -> &str {
            "silu"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(silu(i[0]))
        }
        fn vjp(&self, i: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            Ok(vec![silu_vjp(i[0], g)])
        }
    }

    impl<T: Scalar> DiffOp<T> for LayerNorm {
        fn name(&self) -> &str {
            "layer_norm"
        }
        fn forward(&self, i: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(layer_norm(i[0], self.axis, 1e-5)?.0)
        }
        fn vjp(&self, i: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let (y, is) = layer_norm(i[0], self.axis, 1e-5)?;
            Ok(vec![layer_norm_vjp(&y, &is, g, self.axis)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_op;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[2., 3., 4., 5.]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let err = matmul(&t(&[1, 2], &[1., 2.]), &t(&[3, 1], &[1., 2., 3.])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let rep = check_op(&diff::MatMul, &[&a, &b], 11).unwrap();
        assert!(rep.max_abs_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let rep = check_op(&diff::MatMul, &[&a, &b], 5).unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[2], &[0., 0.]), 0, None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let mask = Mask::new(&[2], vec![true, false]).unwrap();
        let y = softmax(&t(&[2], &[50., -3.]), 0, Some(&mask)).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        let y = softmax(&t(&[3], &[1., 2., 3.]), 0, None).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, v) in [1f64, 2., 3.].iter().enumerate() {
            assert!((y.data()[i] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_errors() {
        let mask = Mask::all(&[1, 3], false);
        let r = softmax(&t(&[1, 3], &[1., 2., 3.]), 1, Some(&mask));
        assert!(matches!(r, Err(Error::FullyMasked(_))));
    }

    #[test]
    fn softmax_broadcast_mask_along_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let mask = Mask::new(&[1, 3, 4], (0..12).map(|i| i % 3 != 1 || i < 4).collect()).unwrap();
        let y = softmax(&x, 1, Some(&mask)).unwrap();
        for b in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|a| y.data()[b * 12 + a * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                for a in 0..3 {
                    if !mask.data[a * 4 + i] {
                        assert_eq!(y.data()[b * 12 + a * 4 + i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1x1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(conv1x1(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let y = conv1x1(&x, &Tensor::zeros(&[2, 3]), &t(&[2], &[0.25, -1.5])).unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 0.25));
        assert!(y.data()[4..].iter().all(|&v| v == -1.5));

        let w = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng);
        let y = conv1x1(&x, &w, &Tensor::zeros(&[1])).unwrap();
        for p in 0..4 {
            let mut acc = 0.0;
            for c in 0..3 {
                acc += w.data()[c] * x.data()[c * 4 + p];
            }
            assert_eq!(y.data()[p], acc);
        }
        assert!(conv1x1(&x, &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        assert_eq!(add(&x, &Tensor::zeros(&[2, 3])).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(&[2, 2])).is_err());
        let (y, _) = layer_norm(&Tensor::<f64>::full(&[2, 5], 3.7), 1, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let rep = check_op(&diff::Silu, &[&x], 0).unwrap();
        assert!(rep.max_abs_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn broadcast_add_and_mul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 1], 1.0, &mut rng);
        assert_eq!(add(&a, &b).unwrap().shape(), &[2, 3, 4]);
        assert!(check_op(&diff::Add, &[&a, &b], 1).unwrap().passed(1e-4));
        assert!(check_op(&diff::Mul, &[&a, &b], 2).unwrap().passed(1e-4));
    }
}
