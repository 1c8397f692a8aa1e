//! Transformer denoiser for point clouds.
//!
//! The model reads a context of `[conditioning tokens] [timestep token]
//! [low-res point tokens (upsampler only)] [point tokens]`, runs a pre-norm
//! transformer over it, and projects the final `K` output tokens to 12
//! channels per point: 6 for the predicted noise and 6 for the variance
//! interpolation coefficient (passed through a logistic so it lands in
//! `(0, 1)`). Point tokens and low-res tokens carry no positional encoding,
//! so permuting input points permutes the outputs the same way. Conditioning
//! patch tokens do get learned position embeddings; their order is
//! meaningful.

use crate::diffusion::{DenoiserOutput, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::geometry::ViewImage;
use crate::nn::{fl, gelu, gelu_grad, sigmoid, Linear, Param, ParamFn, Real, Stack, StackCache};
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dimension of the raw sinusoidal timestep features fed to the time MLP.
pub const TIMESTEP_FEATURES: usize = 128;
/// Channels per input point (xyz + rgb).
pub const POINT_CHANNELS: usize = 6;
/// Channels per output token: noise prediction plus variance coefficient.
pub const OUTPUT_CHANNELS: usize = 2 * POINT_CHANNELS;
/// Feed-forward widening factor inside each block.
pub const MLP_RATIO: usize = 4;
/// Gaussian init standard deviation for all trainable tensors.
pub const INIT_STD: f64 = 0.02;

/// How the model is conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// No conditioning tokens at all.
    None,
    /// One token from a per-class embedding table.
    SingleVector,
    /// A grid of image-patch tokens from a rendered RGBAD view.
    TokenGrid,
}

/// Architecture hyperparameters. `point_count` is the number of points the
/// model denoises; the upsampler additionally consumes `cond_point_count`
/// clean points through a separate embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub point_count: usize,
    pub cond_mode: CondMode,
    /// Embedding-table size for `SingleVector` conditioning.
    pub num_classes: usize,
    /// Square view edge length in pixels for `TokenGrid` conditioning.
    pub image_size: usize,
    /// Patch edge length; `image_size` must divide evenly.
    pub patch_size: usize,
    pub is_upsampler: bool,
    pub cond_point_count: usize,
}

impl DenoiserConfig {
    /// Desk-scale base model: width 128, depth 4, 256 points.
    pub fn desk_base(cond_mode: CondMode) -> Self {
        DenoiserConfig {
            width: 128,
            depth: 4,
            heads: 4,
            point_count: 256,
            cond_mode,
            num_classes: 6,
            image_size: 32,
            patch_size: 4,
            is_upsampler: false,
            cond_point_count: 0,
        }
    }

    /// Desk-scale upsampler: width 96, depth 4, 256 clean points in,
    /// 768 new points out.
    pub fn desk_upsampler(cond_mode: CondMode) -> Self {
        DenoiserConfig {
            width: 96,
            depth: 4,
            heads: 4,
            point_count: 768,
            cond_mode,
            num_classes: 6,
            image_size: 32,
            patch_size: 4,
            is_upsampler: true,
            cond_point_count: 256,
        }
    }

    /// Number of conditioning tokens in the context.
    pub fn cond_token_count(&self) -> usize {
        match self.cond_mode {
            CondMode::None => 0,
            CondMode::SingleVector => 1,
            CondMode::TokenGrid => {
                let side = self.image_size / self.patch_size;
                side * side
            }
        }
    }

    /// Flattened channel count of one image patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 5
    }

    /// Total context length seen by the transformer.
    pub fn context_len(&self) -> usize {
        let low = if self.is_upsampler {
            self.cond_point_count
        } else {
            0
        };
        self.cond_token_count() + 1 + low + self.point_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.point_count == 0 {
            return Err(Error::invalid("denoiser config: zero-sized dimension"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "denoiser config: width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.cond_mode == CondMode::TokenGrid {
            if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
                return Err(Error::invalid(format!(
                    "denoiser config: image size {} not divisible by patch size {}",
                    self.image_size, self.patch_size
                )));
            }
        }
        if self.cond_mode == CondMode::SingleVector && self.num_classes == 0 {
            return Err(Error::invalid("denoiser config: num_classes must be positive"));
        }
        if self.is_upsampler && self.cond_point_count == 0 {
            return Err(Error::invalid(
                "denoiser config: upsampler needs cond_point_count",
            ));
        }
        if !self.is_upsampler && self.cond_point_count != 0 {
            return Err(Error::invalid(
                "denoiser config: cond_point_count is only valid for the upsampler",
            ));
        }
        Ok(())
    }
}

/// Conditioning for one forward pass. Raw inputs are kept (rather than
/// pre-embedded tokens) so the training path can push gradients into the
/// conditioning encoders.
#[derive(Debug, Clone)]
pub enum Conditioning<F> {
    /// Unconditional model, no tokens.
    None,
    /// Learned null tokens, the guidance-dropout replacement.
    Null,
    /// Class id for `SingleVector` mode.
    Class(usize),
    /// Flattened view patches `(N_c, patch_dim)` for `TokenGrid` mode.
    View { patches: Array2<F> },
    /// Externally supplied, non-trainable tokens `(N_c, width)`.
    Tokens { tokens: Array2<F> },
}

impl<F> Conditioning<F> {
    pub fn is_null(&self) -> bool {
        matches!(self, Conditioning::Null)
    }
}

/// Sinusoidal features for an integer timestep: `dim/2` log-spaced
/// frequencies from 1 down to 1/10000, cosines then sines, as a `(1, dim)`
/// row. Distinct integer timesteps always produce distinct rows because the
/// first frequency is 1 and 2*pi is irrational.
pub fn timestep_features<F: Real>(t: usize, dim: usize) -> Array2<F> {
    assert!(dim % 2 == 0, "timestep feature dim must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10_000.0_f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[[0, i]] = fl(arg.cos());
        out[[0, half + i]] = fl(arg.sin());
    }
    out
}

/// Context row layout for one forward pass.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n_cond: usize,
    n_low: usize,
    k: usize,
}

/// Forward intermediates kept for one backward pass.
struct TrainCache<F: Real> {
    x_t: Array2<F>,
    cond: Conditioning<F>,
    low: Option<Array2<F>>,
    layout: Layout,
    t_feats: Array2<F>,
    time_a1: Array2<F>,
    time_h1: Array2<F>,
    /// Table row fed to the class projection, `SingleVector` only.
    class_row: Option<Array2<F>>,
    stack_cache: StackCache<F>,
    stack_out: Array2<F>,
    /// Logistic output for the variance half of the head.
    v_out: Array2<F>,
}

/// The point-cloud transformer denoiser.
pub struct PointDenoiser<F: Real> {
    pub config: DenoiserConfig,
    point_embed: Linear<F>,
    low_embed: Option<Linear<F>>,
    time_fc1: Linear<F>,
    time_fc2: Linear<F>,
    class_table: Option<Param<F>>,
    class_proj: Option<Linear<F>>,
    patch_proj: Option<Linear<F>>,
    patch_pos: Option<Param<F>>,
    null_tokens: Option<Param<F>>,
    stack: Stack<F>,
    head: Linear<F>,
    cache: Option<TrainCache<F>>,
}

impl<F: Real> PointDenoiser<F> {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let std = INIT_STD;
        let (class_table, class_proj, patch_proj, patch_pos, null_tokens) = match config.cond_mode
        {
            CondMode::None => (None, None, None, None, None),
            CondMode::SingleVector => (
                Some(Param::randn(&[config.num_classes, d], std, rng)),
                Some(Linear::new(d, d, std, rng)),
                None,
                None,
                Some(Param::randn(&[1, d], std, rng)),
            ),
            CondMode::TokenGrid => {
                let n_c = config.cond_token_count();
                (
                    None,
                    None,
                    Some(Linear::new(config.patch_dim(), d, std, rng)),
                    Some(Param::randn(&[n_c, d], std, rng)),
                    Some(Param::randn(&[n_c, d], std, rng)),
                )
            }
        };
        Ok(PointDenoiser {
            point_embed: Linear::new(POINT_CHANNELS, d, std, rng),
            low_embed: if config.is_upsampler {
                Some(Linear::new(POINT_CHANNELS, d, std, rng))
            } else {
                None
            },
            time_fc1: Linear::new(TIMESTEP_FEATURES, d, std, rng),
            time_fc2: Linear::new(d, d, std, rng),
            class_table,
            class_proj,
            patch_proj,
            patch_pos,
            null_tokens,
            stack: Stack::new(d, config.depth, config.heads, MLP_RATIO, std, rng),
            head: Linear::new(d, OUTPUT_CHANNELS, std, rng),
            cache: None,
            config,
        })
    }

    /// Embeds raw points `(n, 6)` into `(n, width)` tokens.
    pub fn embed_points(&self, points: &Array2<F>) -> Result<Array2<F>> {
        if points.ncols() != POINT_CHANNELS {
            return Err(Error::invalid(format!(
                "embed_points: expected {POINT_CHANNELS} channels, got {}",
                points.ncols()
            )));
        }
        Ok(self.point_embed.forward(points))
    }

    /// The `(1, width)` timestep token: sinusoidal features through a
    /// two-layer GELU MLP.
    pub fn embed_timestep(&self, t: usize) -> Array2<F> {
        let f = timestep_features::<F>(t, TIMESTEP_FEATURES);
        let a1 = self.time_fc1.forward(&f);
        let h1 = a1.mapv(gelu);
        self.time_fc2.forward(&h1)
    }

    /// Extracts flattened patches from a rendered view for `TokenGrid`
    /// conditioning. Patch order is row-major over the patch grid; values
    /// within a patch are row-major over pixels with the 5 channels innermost.
    pub fn encode_view(&self, image: &ViewImage) -> Result<Conditioning<F>> {
        if self.config.cond_mode != CondMode::TokenGrid {
            return Err(Error::invalid("encode_view: model is not grid-conditioned"));
        }
        let size = self.config.image_size;
        if image.height() != size || image.width() != size {
            return Err(Error::invalid(format!(
                "encode_view: expected {size}x{size} view, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let p = self.config.patch_size;
        let side = size / p;
        let mut patches = Array2::zeros((side * side, self.config.patch_dim()));
        for gy in 0..side {
            for gx in 0..side {
                let row = gy * side + gx;
                let mut col = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..5 {
                            patches[[row, col]] =
                                fl::<F>(image.pixels[[gy * p + py, gx * p + px, c]] as f64);
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(Conditioning::View { patches })
    }

    /// Class-id conditioning for `SingleVector` mode.
    pub fn encode_vector(&self, class_id: usize) -> Result<Conditioning<F>> {
        if self.config.cond_mode != CondMode::SingleVector {
            return Err(Error::invalid(
                "encode_vector: model is not vector-conditioned",
            ));
        }
        if class_id >= self.config.num_classes {
            return Err(Error::invalid(format!(
                "encode_vector: class {class_id} out of range 0..{}",
                self.config.num_classes
            )));
        }
        Ok(Conditioning::Class(class_id))
    }

    /// Builds conditioning token rows plus, for training, the raw table row
    /// fed to the class projection.
    fn cond_rows(&self, cond: &Conditioning<F>) -> Result<(Array2<F>, Option<Array2<F>>)> {
        let d = self.config.width;
        let n_c = self.config.cond_token_count();
        match (self.config.cond_mode, cond) {
            (CondMode::None, Conditioning::None) => Ok((Array2::zeros((0, d)), None)),
            (_, Conditioning::None) => Err(Error::invalid(
                "forward: conditioned model needs conditioning (use Null to drop)",
            )),
            (CondMode::None, _) => Err(Error::invalid(
                "forward: unconditional model cannot take conditioning",
            )),
            (_, Conditioning::Null) => {
                let null = self.null_tokens.as_ref().expect("null tokens exist");
                Ok((null.v2().to_owned(), None))
            }
            (CondMode::SingleVector, Conditioning::Class(c)) => {
                if *c >= self.config.num_classes {
                    return Err(Error::invalid(format!("class {c} out of range")));
                }
                let table = self.class_table.as_ref().expect("class table exists");
                let row = table.v2().row(*c).insert_axis(Axis(0)).to_owned();
                let tok = self.class_proj.as_ref().expect("class proj").forward(&row);
                Ok((tok, Some(row)))
            }
            (CondMode::TokenGrid, Conditioning::View { patches }) => {
                if patches.nrows() != n_c || patches.ncols() != self.config.patch_dim() {
                    return Err(Error::invalid(format!(
                        "forward: patches shape {:?}, expected ({n_c}, {})",
                        patches.shape(),
                        self.config.patch_dim()
                    )));
                }
                let mut tok = self.patch_proj.as_ref().expect("patch proj").forward(patches);
                tok += &self.patch_pos.as_ref().expect("patch pos").v2();
                Ok((tok, None))
            }
            (_, Conditioning::Tokens { tokens }) => {
                if tokens.nrows() != n_c || tokens.ncols() != d {
                    return Err(Error::invalid(format!(
                        "forward: external tokens shape {:?}, expected ({n_c}, {d})",
                        tokens.shape()
                    )));
                }
                Ok((tokens.clone(), None))
            }
            (mode, other) => Err(Error::invalid(format!(
                "forward: conditioning {other:?} does not fit mode {mode:?}"
            ))),
        }
    }

    fn check_points(&self, x_t: &Array2<F>, low: Option<&Array2<F>>) -> Result<Layout> {
        if x_t.nrows() != self.config.point_count || x_t.ncols() != POINT_CHANNELS {
            return Err(Error::invalid(format!(
                "forward: x_t shape {:?}, expected ({}, {POINT_CHANNELS})",
                x_t.shape(),
                self.config.point_count
            )));
        }
        let n_low = match (self.config.is_upsampler, low) {
            (false, None) => 0,
            (true, Some(l)) => {
                if l.nrows() != self.config.cond_point_count || l.ncols() != POINT_CHANNELS {
                    return Err(Error::invalid(format!(
                        "forward: low-res shape {:?}, expected ({}, {POINT_CHANNELS})",
                        l.shape(),
                        self.config.cond_point_count
                    )));
                }
                l.nrows()
            }
            (false, Some(_)) => {
                return Err(Error::invalid("forward: base model takes no low-res cloud"))
            }
            (true, None) => {
                return Err(Error::invalid("forward: upsampler needs a low-res cloud"))
            }
        };
        Ok(Layout {
            n_cond: self.config.cond_token_count(),
            n_low,
            k: self.config.point_count,
        })
    }

    /// Assembles the full context matrix.
    fn build_context(
        &self,
        x_t: &Array2<F>,
        t: usize,
        cond_tokens: &Array2<F>,
        low: Option<&Array2<F>>,
        layout: Layout,
    ) -> (Array2<F>, Array2<F>, Array2<F>, Array2<F>) {
        let d = self.config.width;
        let len = layout.n_cond + 1 + layout.n_low + layout.k;
        let t_feats = timestep_features::<F>(t, TIMESTEP_FEATURES);
        let time_a1 = self.time_fc1.forward(&t_feats);
        let time_h1 = time_a1.mapv(gelu);
        let time_tok = self.time_fc2.forward(&time_h1);
        let mut ctx = Array2::zeros((len, d));
        ctx.slice_mut(s![..layout.n_cond, ..]).assign(cond_tokens);
        ctx.slice_mut(s![layout.n_cond..layout.n_cond + 1, ..])
            .assign(&time_tok);
        if let Some(l) = low {
            let low_tok = self.low_embed.as_ref().expect("low embed").forward(l);
            ctx.slice_mut(s![layout.n_cond + 1..layout.n_cond + 1 + layout.n_low, ..])
                .assign(&low_tok);
        }
        let pts = self.point_embed.forward(x_t);
        ctx.slice_mut(s![len - layout.k.., ..]).assign(&pts);
        (ctx, t_feats, time_a1, time_h1)
    }

    /// Splits head output into the noise prediction and the logistic-mapped
    /// variance coefficient.
    fn split_head(&self, raw: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let eps = raw.slice(s![.., ..POINT_CHANNELS]).to_owned();
        let v = raw
            .slice(s![.., POINT_CHANNELS..])
            .mapv(sigmoid);
        (eps, v)
    }

    fn run_infer(
        &self,
        x_t: &Array2<F>,
        t: usize,
        cond: &Conditioning<F>,
        low: Option<&Array2<F>>,
    ) -> Result<DenoiserOutput<F>> {
        let layout = self.check_points(x_t, low)?;
        let (cond_tokens, _) = self.cond_rows(cond)?;
        let (ctx, _, _, _) = self.build_context(x_t, t, &cond_tokens, low, layout);
        let out = self.stack.forward_infer(&ctx);
        let k = layout.k;
        let tail = out.slice(s![out.nrows() - k.., ..]).to_owned();
        let raw = self.head.forward(&tail);
        let (eps, v) = self.split_head(&raw);
        Ok(DenoiserOutput { eps, v })
    }

    /// Inference forward for the base model.
    pub fn forward(
        &self,
        x_t: &Array2<F>,
        t: usize,
        cond: &Conditioning<F>,
    ) -> Result<DenoiserOutput<F>> {
        if self.config.is_upsampler {
            return Err(Error::invalid("forward: model is an upsampler"));
        }
        self.run_infer(x_t, t, cond, None)
    }

    /// Inference forward for the upsampler; `low` is the clean conditioning
    /// cloud `(cond_point_count, 6)`.
    pub fn forward_upsampler(
        &self,
        x_t: &Array2<F>,
        t: usize,
        cond: &Conditioning<F>,
        low: &Array2<F>,
    ) -> Result<DenoiserOutput<F>> {
        if !self.config.is_upsampler {
            return Err(Error::invalid("forward_upsampler: model is a base model"));
        }
        self.run_infer(x_t, t, cond, Some(low))
    }

    /// Training forward: same math as inference but keeps every intermediate
    /// needed by [`PointDenoiser::backprop_cached`].
    pub fn predict_train_impl(
        &mut self,
        x_t: &Array2<F>,
        t: usize,
        cond: &Conditioning<F>,
        low: Option<&Array2<F>>,
    ) -> Result<DenoiserOutput<F>> {
        let layout = self.check_points(x_t, low)?;
        let (cond_tokens, class_row) = self.cond_rows(cond)?;
        let (ctx, t_feats, time_a1, time_h1) =
            self.build_context(x_t, t, &cond_tokens, low, layout);
        let (stack_out, stack_cache) = self.stack.forward(&ctx);
        let k = layout.k;
        let tail = stack_out.slice(s![stack_out.nrows() - k.., ..]).to_owned();
        let raw = self.head.forward(&tail);
        let (eps, v) = self.split_head(&raw);
        self.cache = Some(TrainCache {
            x_t: x_t.clone(),
            cond: cond.clone(),
            low: low.cloned(),
            layout,
            t_feats,
            time_a1,
            time_h1,
            class_row,
            stack_cache,
            stack_out,
            v_out: v.clone(),
        });
        Ok(DenoiserOutput { eps, v })
    }

    /// Accumulates parameter gradients for the most recent
    /// [`PointDenoiser::predict_train_impl`] call. Consumes the cache.
    pub fn backprop_cached(&mut self, d_eps: &Array2<F>, d_v: &Array2<F>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backprop without a cached forward"))?;
        let layout = cache.layout;
        let k = layout.k;
        if d_eps.nrows() != k || d_v.nrows() != k {
            return Err(Error::invalid("backprop: gradient shape mismatch"));
        }
        // Through the logistic on the variance half.
        let mut d_raw = Array2::zeros((k, OUTPUT_CHANNELS));
        d_raw.slice_mut(s![.., ..POINT_CHANNELS]).assign(d_eps);
        {
            let mut dv_half = d_raw.slice_mut(s![.., POINT_CHANNELS..]);
            ndarray::Zip::from(&mut dv_half)
                .and(d_v)
                .and(&cache.v_out)
                .for_each(|d, &g, &s| *d = g * s * (F::one() - s));
        }
        let total = cache.stack_out.nrows();
        let tail = cache.stack_out.slice(s![total - k.., ..]).to_owned();
        let d_tail = self.head.backward(&tail, &d_raw);
        let mut d_stack_out = Array2::zeros((total, self.config.width));
        d_stack_out.slice_mut(s![total - k.., ..]).assign(&d_tail);
        let d_ctx = self.stack.backward(&cache.stack_cache, &d_stack_out);

        // Split context gradients back to the embedders.
        let d_cond = d_ctx.slice(s![..layout.n_cond, ..]).to_owned();
        let d_time = d_ctx
            .slice(s![layout.n_cond..layout.n_cond + 1, ..])
            .to_owned();
        let d_low = d_ctx
            .slice(s![layout.n_cond + 1..layout.n_cond + 1 + layout.n_low, ..])
            .to_owned();
        let d_pts = d_ctx.slice(s![total - k.., ..]).to_owned();

        match (&cache.cond, self.config.cond_mode) {
            (Conditioning::None, _) => {}
            (Conditioning::Null, _) => {
                let null = self.null_tokens.as_mut().expect("null tokens");
                let mut g = null.g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                g += &d_cond;
            }
            (Conditioning::Class(c), CondMode::SingleVector) => {
                let row = cache.class_row.as_ref().expect("class row cached");
                let d_row = self
                    .class_proj
                    .as_mut()
                    .expect("class proj")
                    .backward(row, &d_cond);
                let table = self.class_table.as_mut().expect("class table");
                let mut g = table.g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut target = g.row_mut(*c);
                target += &d_row.row(0);
            }
            (Conditioning::View { patches }, CondMode::TokenGrid) => {
                self.patch_proj
                    .as_mut()
                    .expect("patch proj")
                    .backward(patches, &d_cond);
                let pos = self.patch_pos.as_mut().expect("patch pos");
                let mut g = pos.g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                g += &d_cond;
            }
            (Conditioning::Tokens { .. }, _) => {}
            (other, mode) => {
                return Err(Error::invalid(format!(
                    "backprop: conditioning {other:?} does not fit mode {mode:?}"
                )))
            }
        }

        let dh1 = self.time_fc2.backward(&cache.time_h1, &d_time);
        let mut da1 = dh1;
        da1.zip_mut_with(&cache.time_a1, |d, &a| *d = *d * gelu_grad(a));
        self.time_fc1.backward(&cache.t_feats, &da1);

        if layout.n_low > 0 {
            let low = cache.low.as_ref().expect("low cloud cached");
            self.low_embed
                .as_mut()
                .expect("low embed")
                .backward(low, &d_low);
        }
        self.point_embed.backward(&cache.x_t, &d_pts);
        Ok(())
    }

    /// Visits every trainable tensor with a stable dot-separated name.
    pub fn for_each_param(&mut self, f: &mut ParamFn<'_, F>) {
        self.point_embed.for_each_param("point_embed", f);
        if let Some(l) = self.low_embed.as_mut() {
            l.for_each_param("low_embed", f);
        }
        self.time_fc1.for_each_param("time_fc1", f);
        self.time_fc2.for_each_param("time_fc2", f);
        if let Some(p) = self.class_table.as_mut() {
            f("class_table", p);
        }
        if let Some(l) = self.class_proj.as_mut() {
            l.for_each_param("class_proj", f);
        }
        if let Some(l) = self.patch_proj.as_mut() {
            l.for_each_param("patch_proj", f);
        }
        if let Some(p) = self.patch_pos.as_mut() {
            f("patch_pos", p);
        }
        if let Some(p) = self.null_tokens.as_mut() {
            f("null_tokens", p);
        }
        self.stack.for_each_param("stack", f);
        self.head.for_each_param("head", f);
    }

    /// Total number of trainable scalars.
    pub fn count_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p| n += p.count());
        n
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(&mut |_, p| p.zero_grad());
    }
}

impl<F: Real> TrainableDenoiser<F> for PointDenoiser<F> {
    fn predict_train(
        &mut self,
        x_t: &Array2<F>,
        t: usize,
        cond: &Conditioning<F>,
    ) -> Result<DenoiserOutput<F>> {
        if self.config.is_upsampler {
            return Err(Error::invalid(
                "predict_train: wrap the upsampler in UpsamplerTrainView",
            ));
        }
        self.predict_train_impl(x_t, t, cond, None)
    }

    fn backprop(&mut self, d_eps: &Array2<F>, d_v: &Array2<F>) -> Result<()> {
        self.backprop_cached(d_eps, d_v)
    }
}

/// Adapter that fixes the low-res conditioning cloud so the upsampler
/// satisfies the training interface used by the loss.
pub struct UpsamplerTrainView<'a, F: Real> {
    pub model: &'a mut PointDenoiser<F>,
    pub low: Array2<F>,
}

impl<F: Real> TrainableDenoiser<F> for UpsamplerTrainView<'_, F> {
    fn predict_train(
        &mut self,
        x_t: &Array2<F>,
        t: usize,
        cond: &Conditioning<F>,
    ) -> Result<DenoiserOutput<F>> {
        self.model.predict_train_impl(x_t, t, cond, Some(&self.low))
    }

    fn backprop(&mut self, d_eps: &Array2<F>, d_v: &Array2<F>) -> Result<()> {
        self.model.backprop_cached(d_eps, d_v)
    }
}
