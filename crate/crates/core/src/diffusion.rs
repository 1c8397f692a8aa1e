//! Discrete-time Gaussian diffusion: noise schedules, forward noising, the
//! reverse posterior step, classifier-free guidance, and the hybrid training
//! loss for models that predict both the noise and an interpolation
//! coefficient for the reverse variance.

use crate::denoiser::Conditioning;
use crate::error::{Error, Result};
use crate::nn::{fl, Real};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Timestep count used by the desk presets.
pub const DEFAULT_TIMESTEPS: usize = 1024;
/// Weight of the variational term in the hybrid loss.
pub const DEFAULT_VLB_WEIGHT: f64 = 0.001;
/// Probability of replacing the conditioning with the learned null tokens
/// during training, enabling classifier-free guidance at sampling time.
pub const DEFAULT_COND_DROP_PROB: f64 = 0.1;
/// Guidance scale applied at sampling time unless overridden.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 3.0;

/// Which beta progression to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linearly spaced betas, rescaled from the canonical 1000-step range
    /// `[1e-4, 0.02]` so shorter ladders keep the same total noise.
    Linear,
    /// Squared-cosine cumulative schedule with offset 0.008 and betas capped
    /// at 0.999.
    Cosine,
}

/// Precomputed per-timestep quantities shared by training and sampling.
///
/// `alpha_bar[t]` is the cumulative product of `1 - beta` up to and including
/// `t`; `alpha_bar_prev[t]` shifts that by one with `alpha_bar_prev[0] = 1`.
/// `posterior_variance[0]` is exactly zero, so its log is stored clipped:
/// entry 0 borrows the value from entry 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha_bar_prev: Vec<f64>,
    pub posterior_variance: Vec<f64>,
    pub posterior_log_variance_clipped: Vec<f64>,
}

/// Builds a schedule of the given kind and length.
pub fn make_schedule(kind: ScheduleKind, timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::invalid("schedule needs at least 2 timesteps"));
    }
    let t_f = timesteps as f64;
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / t_f;
            let lo = scale * 1e-4;
            let hi = scale * 0.02;
            (0..timesteps)
                .map(|i| lo + (hi - lo) * i as f64 / (t_f - 1.0))
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |u: f64| ((u / t_f + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            (0..timesteps)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(0.999))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for &b in &beta {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::numeric("make_schedule", format!("beta {b} out of (0,1)")));
        }
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    let alpha_bar_prev: Vec<f64> = std::iter::once(1.0)
        .chain(alpha_bar.iter().copied().take(timesteps - 1))
        .collect();
    let posterior_variance: Vec<f64> = (0..timesteps)
        .map(|t| beta[t] * (1.0 - alpha_bar_prev[t]) / (1.0 - alpha_bar[t]))
        .collect();
    let mut posterior_log_variance_clipped: Vec<f64> =
        posterior_variance.iter().map(|&v| v.ln()).collect();
    posterior_log_variance_clipped[0] = posterior_variance[1].ln();
    for t in 1..timesteps {
        if alpha_bar[t] >= alpha_bar[t - 1] {
            return Err(Error::numeric(
                "make_schedule",
                format!("alpha_bar not strictly decreasing at t={t}"),
            ));
        }
    }
    Ok(NoiseSchedule {
        kind,
        timesteps,
        beta,
        alpha_bar,
        alpha_bar_prev,
        posterior_variance,
        posterior_log_variance_clipped,
    })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize, context: &str) -> Result<()> {
        if t >= self.timesteps {
            return Err(Error::invalid(format!(
                "{context}: timestep {t} out of range 0..{}",
                self.timesteps
            )));
        }
        Ok(())
    }
}

/// Forward noising: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<F: Real>(
    x0: &Array2<F>,
    t: usize,
    eps: &Array2<F>,
    schedule: &NoiseSchedule,
) -> Result<Array2<F>> {
    schedule.check_t(t, "q_sample")?;
    if x0.raw_dim() != eps.raw_dim() {
        return Err(Error::invalid(format!(
            "q_sample: x0 shape {:?} != eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar[t];
    let c0 = fl::<F>(ab.sqrt());
    let ce = fl::<F>((1.0 - ab).sqrt());
    Ok(x0.mapv(|v| v * c0) + &eps.mapv(|v| v * ce))
}

/// What a denoiser returns for one cloud: predicted noise `eps` and the
/// variance interpolation coefficient `v` in `[0, 1]`, both shaped like the
/// input points.
#[derive(Debug, Clone)]
pub struct DenoiserOutput<F> {
    pub eps: Array2<F>,
    pub v: Array2<F>,
}

/// Reconstruction of `x0` implied by a noise prediction at timestep `t`.
pub fn predicted_x0<F: Real>(
    x_t: &Array2<F>,
    t: usize,
    eps_hat: &Array2<F>,
    schedule: &NoiseSchedule,
) -> Result<Array2<F>> {
    schedule.check_t(t, "predicted_x0")?;
    let ab = schedule.alpha_bar[t];
    let inv = fl::<F>(1.0 / ab.sqrt());
    let ce = fl::<F>((1.0 - ab).sqrt() / ab.sqrt());
    Ok(x_t.mapv(|v| v * inv) - &eps_hat.mapv(|v| v * ce))
}

/// Mean of the reverse-process Gaussian implied by a noise prediction:
/// `mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(1 - beta_t)`.
pub fn posterior_mean_from_eps<F: Real>(
    x_t: &Array2<F>,
    t: usize,
    eps_hat: &Array2<F>,
    schedule: &NoiseSchedule,
) -> Result<Array2<F>> {
    schedule.check_t(t, "posterior_mean_from_eps")?;
    let b = schedule.beta[t];
    let ab = schedule.alpha_bar[t];
    let inv_sqrt_alpha = fl::<F>(1.0 / (1.0 - b).sqrt());
    let coef = fl::<F>(b / (1.0 - ab).sqrt() / (1.0 - b).sqrt());
    Ok(x_t.mapv(|v| v * inv_sqrt_alpha) - &eps_hat.mapv(|v| v * coef))
}

/// Mean of the forward-process posterior `q(x_{t-1} | x_t, x0)` from an
/// explicit `x0`, the form samplers use after clamping the reconstruction.
pub fn posterior_mean_from_x0<F: Real>(
    x0: &Array2<F>,
    x_t: &Array2<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<F>> {
    schedule.check_t(t, "posterior_mean_from_x0")?;
    let b = schedule.beta[t];
    let ab = schedule.alpha_bar[t];
    let ab_prev = schedule.alpha_bar_prev[t];
    let coef_x0 = fl::<F>(ab_prev.sqrt() * b / (1.0 - ab));
    let coef_xt = fl::<F>((1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    Ok(x0.mapv(|v| v * coef_x0) + &x_t.mapv(|v| v * coef_xt))
}

/// Per-element log variance of the reverse Gaussian from the interpolation
/// coefficient: `v ln(beta_t) + (1 - v) ln(posterior_variance_t)`, using the
/// clipped posterior log at `t = 0`.
pub fn model_log_variance<F: Real>(
    v: &Array2<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<F>> {
    schedule.check_t(t, "model_log_variance")?;
    let log_beta = fl::<F>(schedule.beta[t].ln());
    let log_post = fl::<F>(schedule.posterior_log_variance_clipped[t]);
    Ok(v.mapv(|c| c * log_beta + (F::one() - c) * log_post))
}

/// One ancestral step: draws `x_{t-1}` from the reverse Gaussian defined by
/// the model output. At `t = 0` the mean is returned without noise.
pub fn posterior_step<F: Real>(
    x_t: &Array2<F>,
    t: usize,
    out: &DenoiserOutput<F>,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Array2<F>> {
    if out.eps.raw_dim() != x_t.raw_dim() || out.v.raw_dim() != x_t.raw_dim() {
        return Err(Error::invalid("posterior_step: output shapes must match x_t"));
    }
    let mean = posterior_mean_from_eps(x_t, t, &out.eps, schedule)?;
    if t == 0 {
        return Ok(mean);
    }
    let log_var = model_log_variance(&out.v, t, schedule)?;
    let mut x = mean;
    let half = fl::<F>(0.5);
    ndarray::Zip::from(&mut x).and(&log_var).for_each(|xv, &lv| {
        let z: f64 = StandardNormal.sample(rng);
        *xv = *xv + (lv * half).exp() * fl::<F>(z);
    });
    Ok(x)
}

/// Classifier-free guidance combination
/// `(1 - s) eps_uncond + s eps_cond`, which equals
/// `eps_uncond + s (eps_cond - eps_uncond)` and reproduces each input exactly
/// at `s = 0` and `s = 1`.
pub fn guided_eps<F: Real>(eps_uncond: &Array2<F>, eps_cond: &Array2<F>, scale: F) -> Array2<F> {
    let one_minus = F::one() - scale;
    let mut out = eps_uncond.mapv(|u| u * one_minus);
    ndarray::Zip::from(&mut out)
        .and(eps_cond)
        .for_each(|o, &c| *o = *o + scale * c);
    out
}

/// Sampling-time guidance settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub scale: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            scale: DEFAULT_GUIDANCE_SCALE,
        }
    }
}

/// With probability `p`, replaces the conditioning with the null conditioning
/// of the same token count. Identity for `Conditioning::None`.
pub fn maybe_drop_conditioning<F: Real>(
    cond: &Conditioning<F>,
    p: f64,
    rng: &mut impl Rng,
) -> Conditioning<F> {
    if matches!(cond, Conditioning::None) {
        return cond.clone();
    }
    if rng.random::<f64>() < p {
        Conditioning::Null
    } else {
        cond.clone()
    }
}

/// Interface `training_loss` needs from a model: one prediction that caches
/// its intermediates, then one gradient accumulation driven by the loss
/// gradients with respect to `eps` and `v`.
pub trait TrainableDenoiser<F: Real> {
    fn predict_train(
        &mut self,
        x_t: &Array2<F>,
        t: usize,
        cond: &Conditioning<F>,
    ) -> Result<DenoiserOutput<F>>;
    fn backprop(&mut self, d_eps: &Array2<F>, d_v: &Array2<F>) -> Result<()>;
}

/// Scalar summary of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub vlb: f64,
}

/// Hybrid loss `mse + vlb_weight * vlb` for a single cloud at timestep `t`.
///
/// Draws `eps`, forms `x_t`, runs the model, and accumulates gradients into
/// the model via [`TrainableDenoiser::backprop`]. The variational term treats
/// the predicted mean as a constant, so its gradient flows only through `v`;
/// it is measured in bits per element. At `t = 0` the term is the Gaussian
/// negative log likelihood of `x0` under the model's reverse distribution
/// instead of a KL.
pub fn training_loss<F: Real>(
    model: &mut impl TrainableDenoiser<F>,
    x0: &Array2<F>,
    cond: &Conditioning<F>,
    t: usize,
    schedule: &NoiseSchedule,
    vlb_weight: f64,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    schedule.check_t(t, "training_loss")?;
    let eps = Array2::from_shape_fn(x0.raw_dim(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        fl::<F>(z)
    });
    let x_t = q_sample(x0, t, &eps, schedule)?;
    let out = model.predict_train(&x_t, t, cond)?;
    if out.eps.raw_dim() != x0.raw_dim() || out.v.raw_dim() != x0.raw_dim() {
        return Err(Error::invalid("training_loss: model output shape mismatch"));
    }
    let n_el = fl::<F>(x0.len() as f64);
    let ln2 = std::f64::consts::LN_2;

    let diff = &out.eps - &eps;
    let mse = diff.iter().map(|&d| d * d).sum::<F>() / n_el;

    // Variational term with the mean branch held constant.
    let log_var = model_log_variance(&out.v, t, schedule)?;
    let mean_model = posterior_mean_from_eps(&x_t, t, &out.eps, schedule)?;
    let log_beta = schedule.beta[t].ln();
    let log_post = schedule.posterior_log_variance_clipped[t];
    let dlv_dv = fl::<F>(log_beta - log_post);
    let half = fl::<F>(0.5);

    let mut vlb_sum = F::zero();
    let mut d_v = Array2::zeros(x0.raw_dim());
    if t > 0 {
        // KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t)) per element.
        let ab = schedule.alpha_bar[t];
        let ab_prev = schedule.alpha_bar_prev[t];
        let b = schedule.beta[t];
        let coef_x0 = fl::<F>(ab_prev.sqrt() * b / (1.0 - ab));
        let coef_xt = fl::<F>((1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        let var_q = fl::<F>(schedule.posterior_variance[t]);
        let log_var_q = fl::<F>(schedule.posterior_variance[t].ln());
        ndarray::Zip::from(&mut d_v)
            .and(x0)
            .and(&x_t)
            .and(&mean_model)
            .and(&log_var)
            .for_each(|dv, &x0v, &xtv, &mp, &lv| {
                let mq = coef_x0 * x0v + coef_xt * xtv;
                let dm = mq - mp;
                let ratio = (var_q + dm * dm) * (-lv).exp();
                let kl = half * (lv - log_var_q) + half * ratio - half;
                vlb_sum = vlb_sum + kl;
                // dKL/d(log var) = 1/2 - ratio/2, then chain through v.
                *dv = (half - half * ratio) * dlv_dv;
            });
    } else {
        // Negative log likelihood of x0 under N(mean, exp(log_var)).
        let log_2pi = fl::<F>((2.0 * std::f64::consts::PI).ln());
        ndarray::Zip::from(&mut d_v)
            .and(x0)
            .and(&mean_model)
            .and(&log_var)
            .for_each(|dv, &x0v, &mp, &lv| {
                let dm = x0v - mp;
                let ratio = dm * dm * (-lv).exp();
                let nll = half * (log_2pi + lv + ratio);
                vlb_sum = vlb_sum + nll;
                *dv = (half - half * ratio) * dlv_dv;
            });
    }
    let bits = fl::<F>(1.0 / ln2);
    let vlb = vlb_sum / n_el * bits;
    let total = mse + fl::<F>(vlb_weight) * vlb;

    let d_scale = fl::<F>(2.0) / n_el;
    let d_eps = diff.mapv(|d| d * d_scale);
    let dv_scale = fl::<F>(vlb_weight) / n_el * bits;
    d_v.mapv_inplace(|d| d * dv_scale);
    model.backprop(&d_eps, &d_v)?;

    Ok(LossTerms {
        total: total.to_f64().expect("finite loss"),
        mse: mse.to_f64().expect("finite mse"),
        vlb: vlb.to_f64().expect("finite vlb"),
    })
}
