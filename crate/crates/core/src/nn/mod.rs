//! Minimal CPU neural-network toolkit.
//!
//! Everything is written against an explicit forward-cache / backward-pass
//! convention: `forward` returns the output plus whatever intermediate values
//! the matching `backward` needs, and `backward` accumulates parameter
//! gradients in place while returning the gradient with respect to the input.
//! No tape, no graph; the call sites spell out the data flow.
//!
//! All layers are generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod adam;
pub mod attention;
pub mod block;

pub use adam::Adam;
pub use attention::{Mha, MhaCache};
pub use block::{Block, BlockCache, CrossBlock, CrossBlockCache, Mlp, MlpCache, Stack, StackCache};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar type bound for all layers: `f32` or `f64`.
pub trait Real: ndarray::NdFloat + std::iter::Sum + serde::Serialize {}
impl Real for f32 {}
impl Real for f64 {}

/// Casts an `f64` constant into the active scalar type.
#[inline]
pub fn fl<F: Real>(x: f64) -> F {
    F::from(x).expect("constant representable in scalar type")
}

/// A trainable tensor: value plus accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub v: ArrayD<F>,
    pub g: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            v: ArrayD::zeros(shape),
            g: ArrayD::zeros(shape),
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut v = ArrayD::zeros(shape);
        for x in v.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = fl(z * std);
        }
        Param {
            g: ArrayD::zeros(shape),
            v,
        }
    }

    pub fn count(&self) -> usize {
        self.v.len()
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(F::zero());
    }

    pub fn v1(&self) -> ArrayView1<'_, F> {
        self.v.view().into_dimensionality::<Ix1>().expect("1-d param")
    }

    pub fn v2(&self) -> ArrayView2<'_, F> {
        self.v.view().into_dimensionality::<Ix2>().expect("2-d param")
    }
}

/// Visitor alias used by `for_each_param` implementations. Parameters are
/// visited in a fixed order with stable dot-separated names, which is what
/// checkpointing and the optimizer key off.
pub type ParamFn<'a, F> = dyn FnMut(&str, &mut Param<F>) + 'a;

/// Fully connected layer, `y = x W + b`, with `W` stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(dim_in: usize, dim_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::randn(&[dim_in, dim_out], std, rng),
            b: Param::zeros(&[dim_out]),
        }
    }

    /// `x` is `(T, in)`; returns `(T, out)`.
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.v2());
        y += &self.b.v1();
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`. `x` must be the forward input.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let mut gw = self
            .w
            .g
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d grad");
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut gw);
        let mut gb = self
            .b
            .g
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d grad");
        gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.v2().t())
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Per-row layer normalization over the last axis with learned scale/shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub eps: F,
}

/// Values saved by [`LayerNorm::forward`] for the backward pass.
#[derive(Debug)]
pub struct LayerNormCache<F> {
    /// Normalized input before scale/shift, `(T, D)`.
    pub xhat: Array2<F>,
    /// `1 / sqrt(var + eps)` per row, `(T,)`.
    pub inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param {
                v: ArrayD::ones(vec![dim].as_slice()),
                g: ArrayD::zeros(vec![dim].as_slice()),
            },
            beta: Param::zeros(&[dim]),
            eps: fl(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = fl::<F>(x.ncols() as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            let is = F::one() / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * is);
            *s = is;
        }
        let mut y = xhat.clone();
        y *= &self.gamma.v1();
        y += &self.beta.v1();
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: &Array2<F>) -> Array2<F> {
        let d = fl::<F>(dy.ncols() as f64);
        {
            let mut gg = self
                .gamma
                .g
                .view_mut()
                .into_dimensionality::<Ix1>()
                .expect("1-d grad");
            gg += &(dy * &cache.xhat).sum_axis(Axis(0));
            let mut gb = self
                .beta
                .g
                .view_mut()
                .into_dimensionality::<Ix1>()
                .expect("1-d grad");
            gb += &dy.sum_axis(Axis(0));
        }
        let mut dx = Array2::zeros(dy.raw_dim());
        for ((dy_row, xhat_row), (mut dx_row, &inv_std)) in dy
            .rows()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(dx.rows_mut().into_iter().zip(cache.inv_std.iter()))
        {
            // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat)
            //         - xhat * mean(dxhat * xhat))
            let gamma = self.gamma.v1();
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            for ((&dyv, &g), &xh) in dy_row.iter().zip(gamma.iter()).zip(xhat_row.iter()) {
                let dxh = dyv * g;
                m1 = m1 + dxh;
                m2 = m2 + dxh * xh;
            }
            m1 = m1 / d;
            m2 = m2 / d;
            for (((dxv, &dyv), &g), &xh) in dx_row
                .iter_mut()
                .zip(dy_row.iter())
                .zip(gamma.iter())
                .zip(xhat_row.iter())
            {
                *dxv = inv_std * (dyv * g - m1 - xh * m2);
            }
        }
        dx
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// GELU with the tanh approximation, applied element-wise.
pub fn gelu<F: Real>(x: F) -> F {
    let c = fl::<F>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = fl::<F>(0.044715);
    let half = fl::<F>(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = fl::<F>(0.797_884_560_802_865_4);
    let k = fl::<F>(0.044715);
    let half = fl::<F>(0.5);
    let three = fl::<F>(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// In-place row-wise softmax with max subtraction for stability.
pub fn softmax_rows<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Logistic sigmoid.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Central finite difference used by gradient-check tests:
/// `(f(w0 + h) - f(w0 - h)) / (2 h)`. The closure must install the given
/// weight and return the loss; it is called once more with `w0` at the end so
/// the weight is left restored.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, w0: f64, h: f64) -> f64 {
    let up = f(w0 + h);
    let down = f(w0 - h);
    f(w0);
    (up - down) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_forward_matches_manual_product() {
        let mut r = rng();
        let lin = Linear::<f64>::new(3, 2, 0.5, &mut r);
        let x = array![[1.0, -2.0, 0.5]];
        let y = lin.forward(&x);
        let w = lin.w.v2();
        for j in 0..2 {
            let manual = x[[0, 0]] * w[[0, j]] + x[[0, 1]] * w[[1, j]] + x[[0, 2]] * w[[2, j]]
                + lin.b.v1()[j];
            assert!((y[[0, j]] - manual).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut r = rng();
        let ln = LayerNorm::<f64>::new(16);
        let x = Array2::from_shape_fn((4, 16), |_| {
            rand_distr::Distribution::<f64>::sample(&StandardNormal, &mut r) * 3.0 + 1.0
        });
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_is_preserved() {
        let mut m = array![[0.0_f64, 1.0, 3.0], [-5.0, -5.0, -5.0]];
        softmax_rows(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(m[[0, 2]] > m[[0, 1]] && m[[0, 1]] > m[[0, 0]]);
        assert!((m[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Reference values computed from the tanh form with 64-bit scalars.
        assert!(gelu(0.0_f64).abs() < 1e-15);
        assert!((gelu(1.0_f64) - 0.841_191_990_607_477_3).abs() < 1e-12);
        assert!((gelu(-1.0_f64) + 0.158_808_009_392_522_74).abs() < 1e-12);
        // Large input behaves like identity, large negative like zero.
        assert!((gelu(8.0_f64) - 8.0).abs() < 1e-9);
        assert!(gelu(-8.0_f64).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.5_f64, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_grad(x) - fd).abs() < 1e-8,
                "x={x} grad={} fd={fd}",
                gelu_grad(x)
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut r = rng();
        let mut lin = Linear::<f64>::new(4, 3, 0.3, &mut r);
        let x = Array2::from_shape_fn((5, 4), |_| {
            rand_distr::Distribution::<f64>::sample(&StandardNormal, &mut r)
        });
        // Scalar loss: sum of squares of the output.
        let loss = |lin: &Linear<f64>, x: &Array2<f64>| -> f64 {
            lin.forward(x).iter().map(|v| v * v).sum::<f64>()
        };
        let y = lin.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = lin.backward(&x, &dy);

        // Weight gradient.
        let w0 = lin.w.v[[0, 1]];
        let got = lin.w.g[[0, 1]];
        let fd = central_difference(
            |w| {
                lin.w.v[[0, 1]] = w;
                loss(&lin, &x)
            },
            w0,
            1e-6,
        );
        assert!((got - fd).abs() / fd.abs().max(1.0) < 1e-7, "dW {got} vs {fd}");

        // Input gradient.
        let mut x2 = x.clone();
        let x0 = x2[[2, 3]];
        let got = dx[[2, 3]];
        let fd = central_difference(
            |w| {
                x2[[2, 3]] = w;
                loss(&lin, &x2)
            },
            x0,
            1e-6,
        );
        assert!((got - fd).abs() / fd.abs().max(1.0) < 1e-7, "dx {got} vs {fd}");
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut r = rng();
        let mut ln = LayerNorm::<f64>::new(6);
        // Non-trivial gamma/beta so their gradients are exercised.
        for (i, v) in ln.gamma.v.iter_mut().enumerate() {
            *v = 1.0 + 0.1 * i as f64;
        }
        let x = Array2::from_shape_fn((3, 6), |_| {
            rand_distr::Distribution::<f64>::sample(&StandardNormal, &mut r)
        });
        let loss = |ln: &LayerNorm<f64>, x: &Array2<f64>| -> f64 {
            let (y, _) = ln.forward(x);
            y.iter().enumerate().map(|(i, v)| v * v * (1.0 + i as f64 * 0.01)).sum()
        };
        let (y, cache) = ln.forward(&x);
        let dy = Array2::from_shape_fn(y.raw_dim(), |(i, j)| {
            2.0 * y[[i, j]] * (1.0 + (i * 6 + j) as f64 * 0.01)
        });
        let dx = ln.backward(&cache, &dy);

        let x0 = x[[1, 4]];
        let mut xp = x.clone();
        let fd = central_difference(
            |w| {
                xp[[1, 4]] = w;
                loss(&ln, &xp)
            },
            x0,
            1e-6,
        );
        assert!(
            (dx[[1, 4]] - fd).abs() / fd.abs().max(1.0) < 1e-6,
            "dx {} vs {fd}",
            dx[[1, 4]]
        );

        let g0 = ln.gamma.v[[2]];
        let got = ln.gamma.g[[2]];
        let fd = central_difference(
            |w| {
                ln.gamma.v[[2]] = w;
                loss(&ln, &x)
            },
            g0,
            1e-6,
        );
        assert!((got - fd).abs() / fd.abs().max(1.0) < 1e-6, "dgamma {got} vs {fd}");
    }
}
