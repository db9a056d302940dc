use rand::Rng;

use super::kernel::{add_into, attend, attend_vjp, project, project_vjp};
use crate::param::{join, Param, Parameterized};
use crate::tensor::Scalar;

/// Self-attention over the `r·r` lattice tokens of one ROI with a learned
/// per-cell positional encoding and a residual connection:
/// `y = x + Wo · attn(x + pos)`.
#[derive(Clone, Debug)]
pub struct RoiSelfAttention<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub pos: Param<T>,
    side: usize,
    attn_dim: usize,
}

#[derive(Clone, Debug)]
pub struct RoiSelfCache<T> {
    xp: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o: Vec<T>,
}

impl<T: Scalar> RoiSelfAttention<T> {
    /// The output projection starts at zero, so a fresh block is the
    /// identity.
    pub fn new<R: Rng + ?Sized>(channels: usize, attn_dim: usize, side: usize, rng: &mut R) -> Self {
        let tokens = side * side;
        Self {
            wq: Param::fan_in(&[attn_dim, channels], channels, rng),
            wk: Param::fan_in(&[attn_dim, channels], channels, rng),
            wv: Param::fan_in(&[attn_dim, channels], channels, rng),
            wo: Param::zeros(&[channels, attn_dim]),
            pos: Param::fan_in(&[channels, tokens], channels, rng),
            side,
            attn_dim,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// `x` is one ROI, `channels × r·r`.
    pub fn forward(&self, x: &[T]) -> (Vec<T>, RoiSelfCache<T>) {
        let n = self.side * self.side;
        let mut xp = x.to_vec();
        add_into(&mut xp, self.pos.value.data());
        let q = project(&self.wq.value, &xp, n);
        let k = project(&self.wk.value, &xp, n);
        let v = project(&self.wv.value, &xp, n);
        let (o, p) = attend(&q, &k, &v, self.attn_dim, n, n);
        let mut y = project(&self.wo.value, &o, n);
        add_into(&mut y, x);
        (y, RoiSelfCache { xp, q, k, v, p, o })
    }

    pub fn backward(&mut self, cache: &RoiSelfCache<T>, g: &[T]) -> Vec<T> {
        let n = self.side * self.side;
        let go = project_vjp(&self.wo.value, &cache.o, n, g, &mut self.wo.grad);
        let (gq, gk, gv) = attend_vjp(&cache.q, &cache.k, &cache.v, &cache.p, &go, self.attn_dim, n, n);
        let mut gxp = project_vjp(&self.wq.value, &cache.xp, n, &gq, &mut self.wq.grad);
        add_into(&mut gxp, &project_vjp(&self.wk.value, &cache.xp, n, &gk, &mut self.wk.grad));
        add_into(&mut gxp, &project_vjp(&self.wv.value, &cache.xp, n, &gv, &mut self.wv.grad));
        add_into(self.pos.grad.data_mut(), &gxp);
        let mut gx = g.to_vec();
        add_into(&mut gx, &gxp);
        gx
    }
}

impl<T: Scalar> Parameterized<T> for RoiSelfAttention<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
        f(&join(prefix, "pos"), &mut self.pos);
    }
}

#[cfg(test)]
mod tests {
    use super::super::oracle;
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sa = RoiSelfAttention::<f64>::new(3, 4, 3, &mut rng);
        let x = Tensor::<f64>::randn(&[3, 9], 1.0, &mut rng);
        assert_eq!(sa.forward(x.data()).0, x.data());
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sa = RoiSelfAttention::<f64>::new(3, 4, 2, &mut rng);
        sa.wo.value = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let (y, _) = sa.forward(x.data());
        let xp: Vec<f64> = x.data().iter().zip(sa.pos.value.data()).map(|(a, b)| a + b).collect();
        let q = oracle::proj(sa.wq.value.data(), 4, 3, &xp, 4);
        let k = oracle::proj(sa.wk.value.data(), 4, 3, &xp, 4);
        let v = oracle::proj(sa.wv.value.data(), 4, 3, &xp, 4);
        let o = oracle::attend(&q, &k, &v, 4, 4, 4);
        let z = oracle::proj(sa.wo.value.data(), 3, 4, &o, 4);
        for i in 0..12 {
            assert!((y[i] - (x.data()[i] + z[i])).abs() < 1e-6);
        }
    }
}
