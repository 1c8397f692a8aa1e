//! Distribution metrics for generated point clouds.
//!
//! A small order-free attention classifier supplies per-cloud features and
//! class probabilities. From those, [`p_fid`] measures the Fréchet distance
//! between feature statistics of two sample sets, [`p_is`] is the
//! Inception-score analog over predicted class probabilities, and
//! [`class_retrieval_precision`] checks how often conditioned samples are
//! recognized as their intended class.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::sqrtm_psd;
use crate::nn::{fl, Linear, ParamFn, Real, Stack, StackCache};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Upper end of the uniform range the augmentation noise scale is drawn from.
pub const NOISE_SIGMA_MAX: f64 = 0.01;

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Architecture of the point-cloud classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl ClassifierConfig {
    /// Desk-scale preset sized for a handful of well-separated classes.
    pub fn desk() -> Self {
        ClassifierConfig {
            width: 64,
            heads: 4,
            depth: 2,
            num_classes: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.depth == 0 {
            return Err(Error::invalid("width, heads, and depth must be nonzero"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        Ok(())
    }
}

/// Order-free point-cloud classifier: per-point embedding, a self-attention
/// trunk, mean pooling, and a two-layer head. The feature vector is the
/// penultimate activation *before* the rectification, so it carries signed
/// information.
///
/// Only xyz coordinates are consumed; color channels, when present, are
/// ignored.
#[derive(Debug)]
pub struct ClassifierModel<F> {
    pub config: ClassifierConfig,
    pub embed: Linear<F>,
    pub trunk: Stack<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug)]
struct ClassifierCache<F> {
    xyz: Array2<F>,
    trunk: StackCache<F>,
    pooled: Array2<F>,
    h1: Array2<F>,
    relu: Array2<F>,
    probs: Array1<F>,
}

impl<F: Real> ClassifierModel<F> {
    pub fn new(config: ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let std = crate::denoiser::INIT_STD;
        let ratio = crate::denoiser::MLP_RATIO;
        Ok(ClassifierModel {
            embed: Linear::new(3, d, std, rng),
            trunk: Stack::new(d, config.depth, config.heads, ratio, std, rng),
            fc1: Linear::new(d, d, std, rng),
            fc2: Linear::new(d, config.num_classes, std, rng),
            config,
        })
    }

    pub fn for_each_param(&mut self, f: &mut ParamFn<'_, F>) {
        self.embed.for_each_param("embed", f);
        self.trunk.for_each_param("trunk", f);
        self.fc1.for_each_param("fc1", f);
        self.fc2.for_each_param("fc2", f);
    }

    pub fn count_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p| n += p.count());
        n
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(&mut |_, p| p.zero_grad());
    }

    fn check_cloud(&self, cloud: &Array2<f64>) -> Result<Array2<F>> {
        if cloud.nrows() == 0 {
            return Err(Error::invalid("classifier input cloud is empty"));
        }
        if cloud.ncols() != 3 && cloud.ncols() != 6 {
            return Err(Error::invalid(format!(
                "classifier input needs 3 or 6 columns, got {}",
                cloud.ncols()
            )));
        }
        let xyz = cloud.slice(ndarray::s![.., 0..3]);
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("classifier", "non-finite input coordinate"));
        }
        Ok(xyz.mapv(|v| fl::<F>(v)))
    }

    /// Head shared by both passes: pooled trunk output to probabilities.
    fn head(&self, trunk_out: &Array2<F>) -> (Array2<F>, Array2<F>, Array2<F>, Array1<F>) {
        let k = fl::<F>(trunk_out.nrows() as f64);
        let pooled = trunk_out
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .mapv(|v| v / k);
        let h1 = self.fc1.forward(&pooled);
        let relu = h1.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let logits = self.fc2.forward(&relu);
        let probs = softmax_row(&logits.row(0).to_owned());
        (pooled, h1, relu, probs)
    }

    /// Cache-free forward pass for inference.
    fn run_infer(&self, xyz: &Array2<F>) -> (Array2<F>, Array1<F>) {
        let tokens = self.embed.forward(xyz);
        let trunk_out = self.trunk.forward_infer(&tokens);
        let (_, h1, _, probs) = self.head(&trunk_out);
        (h1, probs)
    }

    /// Forward pass that keeps everything the backward pass needs.
    fn run_train(&self, xyz: &Array2<F>) -> ClassifierCache<F> {
        let tokens = self.embed.forward(xyz);
        let (trunk_out, trunk_cache) = self.trunk.forward(&tokens);
        let (pooled, h1, relu, probs) = self.head(&trunk_out);
        ClassifierCache {
            xyz: xyz.clone(),
            trunk: trunk_cache,
            pooled,
            h1,
            relu,
            probs,
        }
    }
}

fn softmax_row<F: Real>(logits: &Array1<F>) -> Array1<F> {
    let top = logits
        .iter()
        .cloned()
        .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    let exps = logits.mapv(|v| (v - top).exp());
    let z = exps.sum();
    exps.mapv(|v| v / z)
}

/// Deterministic inference: returns the pooled feature vector (taken before
/// the head's rectification) and the class probabilities. Accepts `K x 3`
/// clouds or `K x 6` clouds whose color channels are ignored.
pub fn classifier_forward<F: Real>(
    model: &ClassifierModel<F>,
    cloud: &Array2<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let xyz = model.check_cloud(cloud)?;
    let (h1, probs) = model.run_infer(&xyz);
    let features = h1.row(0).mapv(|v| v.to_f64().unwrap_or(f64::NAN));
    let probs = probs.mapv(|v| v.to_f64().unwrap_or(f64::NAN));
    if features.iter().chain(probs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("classifier", "non-finite output"));
    }
    Ok((features, probs))
}

/// One cross-entropy training step on a single labeled cloud. Accumulates
/// parameter gradients (without zeroing first) and returns the loss.
pub fn classifier_training_step<F: Real>(
    model: &mut ClassifierModel<F>,
    cloud: &Array2<f64>,
    label: usize,
) -> Result<f64> {
    let c = model.config.num_classes;
    if label >= c {
        return Err(Error::invalid(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let xyz = model.check_cloud(cloud)?;
    let cache = model.run_train(&xyz);
    let p_label = cache.probs[label].to_f64().unwrap_or(f64::NAN);
    let loss = -p_label.ln();
    if !loss.is_finite() {
        return Err(Error::numeric("classifier_training_step", "non-finite loss"));
    }

    // d loss / d logits = probs - onehot(label).
    let mut dlogits = cache.probs.clone().insert_axis(Axis(0));
    dlogits[[0, label]] = dlogits[[0, label]] - F::one();
    let da = model.fc2.backward(&cache.relu, &dlogits);
    let dh1 = Array2::from_shape_fn(da.raw_dim(), |(i, j)| {
        if cache.h1[[i, j]] > F::zero() {
            da[[i, j]]
        } else {
            F::zero()
        }
    });
    let dpooled = model.fc1.backward(&cache.pooled, &dh1);
    let k = fl::<F>(xyz.nrows() as f64);
    let dtrunk = Array2::from_shape_fn((xyz.nrows(), dpooled.ncols()), |(_, j)| {
        dpooled[[0, j]] / k
    });
    let dtokens = model.trunk.backward(&cache.trunk, &dtrunk);
    model.embed.backward(&cache.xyz, &dtokens);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Training augmentation
// ---------------------------------------------------------------------------

/// Uniformly random rotation matrix, via a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            for v in q.iter_mut() {
                *v /= n;
            }
            break;
        }
    }
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Noise scale for one augmented cloud, `U[0, NOISE_SIGMA_MAX]`.
pub fn draw_augment_sigma(rng: &mut impl Rng) -> f64 {
    rng.random_range(0.0..NOISE_SIGMA_MAX)
}

/// Rotates xyz by `rot` and perturbs each coordinate with `N(0, sigma^2)`.
/// Color channels, when present, pass through unchanged.
pub fn augment_with(
    cloud: &Array2<f64>,
    rot: &[[f64; 3]; 3],
    sigma: f64,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let mut out = cloud.clone();
    for mut row in out.rows_mut() {
        let p = [row[0], row[1], row[2]];
        for a in 0..3 {
            let mut v = rot[a][0] * p[0] + rot[a][1] * p[1] + rot[a][2] * p[2];
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v += sigma * z;
            }
            row[a] = v;
        }
    }
    out
}

/// Training-time augmentation: a uniformly random rotation followed by
/// Gaussian jitter with a per-cloud scale drawn from `U[0, NOISE_SIGMA_MAX]`.
pub fn augment_for_training(cloud: &Array2<f64>, rng: &mut impl Rng) -> Array2<f64> {
    let rot = random_rotation(rng);
    let sigma = draw_augment_sigma(rng);
    augment_with(cloud, &rot, sigma, rng)
}

// ---------------------------------------------------------------------------
// Feature statistics and P-FID
// ---------------------------------------------------------------------------

/// Mean and covariance of a feature sample.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Checks internal consistency: matching dimensions, symmetric
    /// covariance, and no eigenvalue below the numerical-PSD floor.
    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.nrows() != d || self.cov.ncols() != d {
            return Err(Error::invalid(format!(
                "covariance is {}x{}, mean has length {d}",
                self.cov.nrows(),
                self.cov.ncols()
            )));
        }
        let scale = self.cov.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.cov[[i, j]] - self.cov[[j, i]]).abs() > 1e-9 * scale {
                    return Err(Error::invalid(format!(
                        "covariance asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        let (vals, _) = crate::linalg::symmetric_eigen(&self.cov.view())?;
        if let Some(&low) = vals.iter().find(|&&v| v < -1e-8 * scale) {
            return Err(Error::numeric(
                "FeatureStats",
                format!("eigenvalue {low:.3e} below the PSD floor"),
            ));
        }
        Ok(())
    }
}

/// Sample mean and unbiased sample covariance of `features` (`N x d` rows).
pub fn feature_stats(features: &Array2<f64>) -> Result<FeatureStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 feature rows, got {n}"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("feature_stats", "non-finite feature"));
    }
    let mean = features.sum_axis(Axis(0)) / n as f64;
    let centered = features - &mean.clone().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    // gemm output can be asymmetric at rounding level; make it exact.
    for i in 0..cov.nrows() {
        for j in 0..i {
            let s = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = s;
            cov[[j, i]] = s;
        }
    }
    Ok(FeatureStats {
        mean,
        cov,
        count: n,
    })
}

/// Fréchet distance between two Gaussians summarized by `a` and `b`:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`. The cross term is
/// computed via the symmetric product `S_a^{1/2} S_b S_a^{1/2}`, whose
/// square root shares the trace of `(S_a S_b)^{1/2}`; slightly negative
/// eigenvalues are clamped to zero and the result floors at zero.
pub fn p_fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let sa = sqrtm_psd(&a.cov.view())?;
    let mut inner = sa.dot(&b.cov).dot(&sa);
    for i in 0..inner.nrows() {
        for j in 0..i {
            let s = 0.5 * (inner[[i, j]] + inner[[j, i]]);
            inner[[i, j]] = s;
            inner[[j, i]] = s;
        }
    }
    let cross = sqrtm_psd(&inner.view())?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let trace = |m: &Array2<f64>| (0..m.nrows()).map(|i| m[[i, i]]).sum::<f64>();
    let d2 = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * trace(&cross);
    Ok(d2.max(0.0))
}

// ---------------------------------------------------------------------------
// P-IS and retrieval precision
// ---------------------------------------------------------------------------

/// Inception-score analog: `exp` of the mean KL divergence between each row
/// of class probabilities and the marginal over all rows. Always lands in
/// `[1, C]`.
pub fn p_is(probs: &Array2<f64>) -> Result<f64> {
    let (n, c) = probs.dim();
    if n == 0 || c == 0 {
        return Err(Error::invalid("p_is needs a nonempty probability matrix"));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &v in row.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "row {i} holds an invalid probability {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("row {i} sums to {sum}, not 1")));
        }
    }
    let marginal = probs.sum_axis(Axis(0)) / n as f64;
    let mut kl_sum = 0.0;
    for row in probs.rows() {
        for (&p, &q) in row.iter().zip(marginal.iter()) {
            if p > 0.0 {
                kl_sum += p * (p.ln() - q.ln());
            }
        }
    }
    Ok((kl_sum / n as f64).exp())
}

/// Fraction of generated clouds whose most likely predicted class matches
/// the class they were conditioned on. `classify` returns per-class
/// probabilities; argmax ties resolve to the lowest index.
pub fn class_retrieval_precision<M>(
    generated: &[(Array2<f64>, usize)],
    mut classify: M,
) -> Result<f64>
where
    M: FnMut(&Array2<f64>) -> Result<Array1<f64>>,
{
    if generated.is_empty() {
        return Err(Error::invalid("no generated samples to score"));
    }
    let mut hits = 0usize;
    for (cloud, intended) in generated {
        let probs = classify(cloud)?;
        if *intended >= probs.len() {
            return Err(Error::invalid(format!(
                "intended class {intended} out of range for {} classes",
                probs.len()
            )));
        }
        let mut best = 0usize;
        for (j, &v) in probs.iter().enumerate() {
            if v > probs[best] {
                best = j;
            }
        }
        if best == *intended {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

// ---------------------------------------------------------------------------
// Stats cache files
// ---------------------------------------------------------------------------

/// Writes feature statistics to the common checkpoint container. `extra`
/// rides along in the metadata (for example a classifier checksum).
pub fn save_stats(path: &Path, stats: &FeatureStats, extra: serde_json::Value) -> Result<()> {
    stats.validate()?;
    let meta = serde_json::json!({
        "kind": "stats",
        "dim": stats.mean.len(),
        "count": stats.count,
        "extra": extra,
    });
    let mut ckpt = Checkpoint::new(meta);
    ckpt.insert("mean", stats.mean.clone().into_dyn())?;
    ckpt.insert("cov", stats.cov.clone().into_dyn())?;
    ckpt.write(path)
}

/// Reads a statistics file written by [`save_stats`].
pub fn load_stats(path: &Path) -> Result<(FeatureStats, serde_json::Value)> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("stats") {
        return Err(Error::Format(format!(
            "{}: not a statistics file",
            path.display()
        )));
    }
    let grab = |name: &str| {
        ckpt.tensor(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: missing tensor {name:?}", path.display())))
    };
    let mean = grab("mean")?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|e| Error::Format(format!("mean tensor: {e}")))?;
    let cov = grab("cov")?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::Format(format!("cov tensor: {e}")))?;
    let count = ckpt
        .meta
        .get("count")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format(format!("{}: missing count", path.display())))?
        as usize;
    let stats = FeatureStats { mean, cov, count };
    stats.validate()?;
    let extra = ckpt
        .meta
        .get("extra")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    Ok((stats, extra))
}
