//! Multi-head scaled dot-product attention with explicit backward.

use super::{fl, softmax_rows, Linear, ParamFn, Real};
use ndarray::{s, Array2};
use rand::Rng;

/// Multi-head attention. Queries come from `x_q`, keys/values from `x_kv`;
/// self-attention passes the same tensor for both, cross-attention differs.
#[derive(Debug, Clone)]
pub struct Mha<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub heads: usize,
}

/// Intermediate values from [`Mha::forward`] needed by [`Mha::backward`].
#[derive(Debug)]
pub struct MhaCache<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Post-softmax attention weights, one `(Tq, Tk)` matrix per head.
    pub att: Vec<Array2<F>>,
    /// Concatenated per-head context, `(Tq, D)`, input to the output proj.
    pub ctx: Array2<F>,
}

impl<F: Real> Mha<F> {
    pub fn new(dim: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "dim must divide evenly into heads");
        Mha {
            wq: Linear::new(dim, dim, std, rng),
            wk: Linear::new(dim, dim, std, rng),
            wv: Linear::new(dim, dim, std, rng),
            wo: Linear::new(dim, dim, std, rng),
            heads,
        }
    }

    /// `x_q` is `(Tq, D)`, `x_kv` is `(Tk, D)`; returns `(Tq, D)`.
    pub fn forward(&self, x_q: &Array2<F>, x_kv: &Array2<F>) -> (Array2<F>, MhaCache<F>) {
        let d = x_q.ncols();
        let dh = d / self.heads;
        let scale = fl::<F>(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(x_q);
        let k = self.wk.forward(x_kv);
        let v = self.wv.forward(x_kv);
        let mut ctx = Array2::zeros((x_q.nrows(), d));
        let mut att = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut a = qh.dot(&kh.t());
            a.mapv_inplace(|x| x * scale);
            softmax_rows(&mut a);
            let ch = a.dot(&vh);
            ctx.slice_mut(cols).assign(&ch);
            att.push(a);
        }
        let y = self.wo.forward(&ctx);
        (y, MhaCache { q, k, v, att, ctx })
    }

    /// Returns `(dx_q, dx_kv)`. For self-attention the caller adds the two.
    pub fn backward(
        &mut self,
        x_q: &Array2<F>,
        x_kv: &Array2<F>,
        cache: &MhaCache<F>,
        dy: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let d = x_q.ncols();
        let dh = d / self.heads;
        let scale = fl::<F>(1.0 / (dh as f64).sqrt());
        let dctx = self.wo.backward(&cache.ctx, dy);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.att[h];
            let vh = cache.v.slice(cols);
            let dch = dctx.slice(cols);
            // Through the value product.
            dv.slice_mut(cols).assign(&a.t().dot(&dch));
            let datt = dch.dot(&vh.t());
            // Softmax jacobian: ds = a * (datt - rowsum(datt * a)).
            let mut ds = datt;
            for (mut ds_row, a_row) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot: F = ds_row
                    .iter()
                    .zip(a_row.iter())
                    .map(|(&x, &y)| x * y)
                    .sum();
                for (dsv, &av) in ds_row.iter_mut().zip(a_row.iter()) {
                    *dsv = av * (*dsv - dot);
                }
            }
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dx_q = self.wq.backward(x_q, &dq);
        let mut dx_kv = self.wk.backward(x_kv, &dk);
        dx_kv += &self.wv.backward(x_kv, &dv);
        (dx_q, dx_kv)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.wq.for_each_param(&format!("{prefix}.wq"), f);
        self.wk.for_each_param(&format!("{prefix}.wk"), f);
        self.wv.for_each_param(&format!("{prefix}.wv"), f);
        self.wo.for_each_param(&format!("{prefix}.wo"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::central_difference;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    /// Scalar re-implementation of one attention head for a tiny case:
    /// two tokens, one head, explicit loops over every index.
    #[test]
    fn single_head_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let mha = Mha::<f64>::new(dim, 1, 0.4, &mut rng);
        let x = randn(2, dim, &mut rng);
        let (y, _) = mha.forward(&x, &x);

        let w = |l: &Linear<f64>, x: &Array2<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((x.nrows(), dim));
            for i in 0..x.nrows() {
                for j in 0..dim {
                    let mut acc = l.b.v1()[j];
                    for k in 0..dim {
                        acc += x[[i, k]] * l.w.v2()[[k, j]];
                    }
                    out[[i, j]] = acc;
                }
            }
            out
        };
        let q = w(&mha.wq, &x);
        let k = w(&mha.wk, &x);
        let v = w(&mha.wv, &x);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut expected = Array2::zeros((2, dim));
        for i in 0..2 {
            let mut logits = [0.0; 2];
            for j in 0..2 {
                let mut dot = 0.0;
                for c in 0..dim {
                    dot += q[[i, c]] * k[[j, c]];
                }
                logits[j] = dot * scale;
            }
            let m = logits[0].max(logits[1]);
            let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
            let z = e[0] + e[1];
            let mut ctx = [0.0; 8];
            for c in 0..dim {
                ctx[c] = (e[0] * v[[0, c]] + e[1] * v[[1, c]]) / z;
            }
            for c in 0..dim {
                let mut acc = mha.wo.b.v1()[c];
                for u in 0..dim {
                    acc += ctx[u] * mha.wo.w.v2()[[u, c]];
                }
                expected[[i, c]] = acc;
            }
        }
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn self_attention_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mha = Mha::<f64>::new(8, 2, 0.3, &mut rng);
        let x = randn(5, 8, &mut rng);
        let loss = |m: &Mha<f64>, x: &Array2<f64>| -> f64 {
            let (y, _) = m.forward(x, x);
            y.iter().enumerate().map(|(i, v)| v * v * (1.0 + 0.01 * i as f64)).sum()
        };
        let (y, cache) = mha.forward(&x, &x);
        let dy = Array2::from_shape_fn(y.raw_dim(), |(i, j)| {
            2.0 * y[[i, j]] * (1.0 + 0.01 * (i * 8 + j) as f64)
        });
        let (dxq, dxkv) = mha.backward(&x, &x, &cache, &dy);
        let dx = &dxq + &dxkv;

        let mut xp = x.clone();
        for &(i, j) in &[(0, 0), (2, 5), (4, 7)] {
            let x0 = xp[[i, j]];
            let fd = central_difference(
                |w| {
                    xp[[i, j]] = w;
                    loss(&mha, &xp)
                },
                x0,
                1e-6,
            );
            assert!(
                (dx[[i, j]] - fd).abs() / fd.abs().max(1.0) < 1e-6,
                "dx[{i},{j}] {} vs {fd}",
                dx[[i, j]]
            );
        }
        for name in ["wq", "wk", "wv", "wo"] {
            let (w0, got) = {
                let l = match name {
                    "wq" => &mha.wq,
                    "wk" => &mha.wk,
                    "wv" => &mha.wv,
                    _ => &mha.wo,
                };
                (l.w.v[[1, 3]], l.w.g[[1, 3]])
            };
            let fd = central_difference(
                |w| {
                    let l = match name {
                        "wq" => &mut mha.wq,
                        "wk" => &mut mha.wk,
                        "wv" => &mut mha.wv,
                        _ => &mut mha.wo,
                    };
                    l.w.v[[1, 3]] = w;
                    loss(&mha, &x)
                },
                w0,
                1e-6,
            );
            assert!(
                (got - fd).abs() / fd.abs().max(1.0) < 1e-6,
                "{name} grad {got} vs {fd}"
            );
        }
    }

    #[test]
    fn cross_attention_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut mha = Mha::<f64>::new(6, 3, 0.3, &mut rng);
        let xq = randn(3, 6, &mut rng);
        let xkv = randn(4, 6, &mut rng);
        let loss = |m: &Mha<f64>, xq: &Array2<f64>, xkv: &Array2<f64>| -> f64 {
            let (y, _) = m.forward(xq, xkv);
            y.iter().map(|v| v * v).sum()
        };
        let (y, cache) = mha.forward(&xq, &xkv);
        let dy = y.mapv(|v| 2.0 * v);
        let (dxq, dxkv) = mha.backward(&xq, &xkv, &cache, &dy);

        let mut xp = xq.clone();
        let x0 = xp[[1, 2]];
        let fd = central_difference(
            |w| {
                xp[[1, 2]] = w;
                loss(&mha, &xp, &xkv)
            },
            x0,
            1e-6,
        );
        assert!((dxq[[1, 2]] - fd).abs() / fd.abs().max(1.0) < 1e-6);

        let mut xp = xkv.clone();
        let x0 = xp[[3, 1]];
        let fd = central_difference(
            |w| {
                xp[[3, 1]] = w;
                loss(&mha, &xq, &xp)
            },
            x0,
            1e-6,
        );
        assert!((dxkv[[3, 1]] - fd).abs() / fd.abs().max(1.0) < 1e-6);
    }
}
