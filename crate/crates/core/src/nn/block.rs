//! Transformer building blocks: GELU MLP, pre-norm residual block, stack.

use super::{gelu, gelu_grad, Linear, LayerNorm, LayerNormCache, Mha, MhaCache, ParamFn, Real};
use ndarray::Array2;
use rand::Rng;

/// Two-layer feed-forward network with GELU, hidden width `ratio * dim`.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug)]
pub struct MlpCache<F> {
    /// Pre-activation output of `fc1`.
    pub a1: Array2<F>,
    /// Post-GELU hidden, input to `fc2`.
    pub h1: Array2<F>,
}

impl<F: Real> Mlp<F> {
    pub fn new(dim: usize, ratio: usize, std: f64, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(dim, dim * ratio, std, rng),
            fc2: Linear::new(dim * ratio, dim, std, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let a1 = self.fc1.forward(x);
        let h1 = a1.mapv(gelu);
        let y = self.fc2.forward(&h1);
        (y, MlpCache { a1, h1 })
    }

    pub fn backward(&mut self, x: &Array2<F>, cache: &MlpCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dh1 = self.fc2.backward(&cache.h1, dy);
        let mut da1 = dh1;
        da1.zip_mut_with(&cache.a1, |d, &a| *d = *d * gelu_grad(a));
        self.fc1.backward(x, &da1)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.fc1.for_each_param(&format!("{prefix}.fc1"), f);
        self.fc2.for_each_param(&format!("{prefix}.fc2"), f);
    }
}

/// Pre-norm transformer block:
/// `x + attn(ln1(x))` followed by `_ + mlp(ln2(_))`.
#[derive(Debug, Clone)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Mha<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

#[derive(Debug)]
pub struct BlockCache<F> {
    pub x: Array2<F>,
    pub ln1: LayerNormCache<F>,
    pub a_in: Array2<F>,
    pub attn: MhaCache<F>,
    pub x1: Array2<F>,
    pub ln2: LayerNormCache<F>,
    pub m_in: Array2<F>,
    pub mlp: MlpCache<F>,
}

impl<F: Real> Block<F> {
    pub fn new(dim: usize, heads: usize, ratio: usize, std: f64, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Mha::new(dim, heads, std, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, ratio, std, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, BlockCache<F>) {
        let (a_in, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&a_in, &a_in);
        let x1 = x + &a;
        let (m_in, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&m_in);
        let y = &x1 + &m;
        (
            y,
            BlockCache {
                x: x.clone(),
                ln1,
                a_in,
                attn,
                x1,
                ln2,
                m_in,
                mlp,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dm_in = self.mlp.backward(&cache.m_in, &cache.mlp, dy);
        let mut dx1 = self.ln2.backward(&cache.ln2, &dm_in);
        dx1 += dy;
        let (da_q, da_kv) = self.attn.backward(&cache.a_in, &cache.a_in, &cache.attn, &dx1);
        let da_in = &da_q + &da_kv;
        let mut dx = self.ln1.backward(&cache.ln1, &da_in);
        dx += &dx1;
        dx
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.ln1.for_each_param(&format!("{prefix}.ln1"), f);
        self.attn.for_each_param(&format!("{prefix}.attn"), f);
        self.ln2.for_each_param(&format!("{prefix}.ln2"), f);
        self.mlp.for_each_param(&format!("{prefix}.mlp"), f);
    }
}

/// Pre-norm block whose attention reads from an external memory:
/// `x + attn(ln1(x), mem)` followed by `_ + mlp(ln2(_))`.
///
/// The memory is consumed as-is; the producer is expected to have applied its
/// own final normalization.
#[derive(Debug, Clone)]
pub struct CrossBlock<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Mha<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

#[derive(Debug)]
pub struct CrossBlockCache<F> {
    pub q_in: Array2<F>,
    pub ln1: LayerNormCache<F>,
    pub mem: Array2<F>,
    pub attn: MhaCache<F>,
    pub ln2: LayerNormCache<F>,
    pub m_in: Array2<F>,
    pub mlp: MlpCache<F>,
}

impl<F: Real> CrossBlock<F> {
    pub fn new(dim: usize, heads: usize, ratio: usize, std: f64, rng: &mut impl Rng) -> Self {
        CrossBlock {
            ln1: LayerNorm::new(dim),
            attn: Mha::new(dim, heads, std, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, ratio, std, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>, mem: &Array2<F>) -> (Array2<F>, CrossBlockCache<F>) {
        let (q_in, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&q_in, mem);
        let x1 = x + &a;
        let (m_in, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&m_in);
        let y = &x1 + &m;
        (
            y,
            CrossBlockCache {
                q_in,
                ln1,
                mem: mem.clone(),
                attn,
                ln2,
                m_in,
                mlp,
            },
        )
    }

    /// Forward without building a cache, for inference.
    pub fn forward_infer(&self, x: &Array2<F>, mem: &Array2<F>) -> Array2<F> {
        let (q_in, _) = self.ln1.forward(x);
        let (a, _) = self.attn.forward(&q_in, mem);
        let x1 = x + &a;
        let (m_in, _) = self.ln2.forward(&x1);
        let (m, _) = self.mlp.forward(&m_in);
        &x1 + &m
    }

    /// Returns `(dx, dmem)`.
    pub fn backward(
        &mut self,
        cache: &CrossBlockCache<F>,
        dy: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let dm_in = self.mlp.backward(&cache.m_in, &cache.mlp, dy);
        let mut dx1 = self.ln2.backward(&cache.ln2, &dm_in);
        dx1 += dy;
        let (dq_in, dmem) = self.attn.backward(&cache.q_in, &cache.mem, &cache.attn, &dx1);
        let mut dx = self.ln1.backward(&cache.ln1, &dq_in);
        dx += &dx1;
        (dx, dmem)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.ln1.for_each_param(&format!("{prefix}.ln1"), f);
        self.attn.for_each_param(&format!("{prefix}.attn"), f);
        self.ln2.for_each_param(&format!("{prefix}.ln2"), f);
        self.mlp.for_each_param(&format!("{prefix}.mlp"), f);
    }
}

/// A sequence of pre-norm blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Stack<F> {
    pub blocks: Vec<Block<F>>,
    pub ln_f: LayerNorm<F>,
}

#[derive(Debug)]
pub struct StackCache<F> {
    pub blocks: Vec<BlockCache<F>>,
    pub ln_f: LayerNormCache<F>,
}

impl<F: Real> Stack<F> {
    pub fn new(dim: usize, depth: usize, heads: usize, ratio: usize, std: f64, rng: &mut impl Rng) -> Self {
        Stack {
            blocks: (0..depth).map(|_| Block::new(dim, heads, ratio, std, rng)).collect(),
            ln_f: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, StackCache<F>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (next, c) = b.forward(&h);
            caches.push(c);
            h = next;
        }
        let (y, ln_f) = self.ln_f.forward(&h);
        (y, StackCache { blocks: caches, ln_f })
    }

    /// Forward without keeping per-block caches, for inference.
    pub fn forward_infer(&self, x: &Array2<F>) -> Array2<F> {
        let mut h = x.clone();
        for b in &self.blocks {
            let (next, _) = b.forward(&h);
            h = next;
        }
        let (y, _) = self.ln_f.forward(&h);
        y
    }

    pub fn backward(&mut self, cache: &StackCache<F>, dy: &Array2<F>) -> Array2<F> {
        let mut d = self.ln_f.backward(&cache.ln_f, dy);
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            d = b.backward(c, &d);
        }
        d
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param(&format!("{prefix}.blocks.{i}"), f);
        }
        self.ln_f.for_each_param(&format!("{prefix}.ln_f"), f);
    }
}
