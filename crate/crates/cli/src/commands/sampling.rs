//! Shared sampling plumbing used by `sample` and by training-time snapshots:
//! builds conditioning for a model's mode and runs one guided diffusion draw.

use super::{CResult, CliError};
use crate::config::{SamplerMethod, SamplerSection};
use ndarray::Array2;
use plume_core::denoiser::{CondMode, Conditioning, PointDenoiser};
use plume_core::diffusion::NoiseSchedule;
use plume_core::geometry::ViewImage;
use plume_core::samplers::{ddpm_sample, heun_sample, DiscreteBridge, GuidedModel, HeunConfig};
use rand::Rng;

/// Second-order sampler settings for one stage of the stack.
pub fn heun_for(s: &SamplerSection, upsampler: bool) -> HeunConfig {
    HeunConfig {
        steps: s.steps,
        sigma_min: s.sigma_min,
        sigma_max: if upsampler {
            s.sigma_max_upsampler
        } else {
            s.sigma_max_base
        },
        rho: s.rho,
        s_churn: if upsampler {
            s.s_churn_upsampler
        } else {
            s.s_churn_base
        },
    }
}

/// Builds conditioning for `model` from whichever source its mode consumes:
/// a rendered view for grid conditioning, a class id for vector conditioning,
/// nothing otherwise.
pub fn conditioning_for(
    model: &PointDenoiser<f32>,
    view: Option<&ViewImage>,
    class_id: Option<usize>,
) -> CResult<Conditioning<f32>> {
    match model.config.cond_mode {
        CondMode::None => Ok(Conditioning::None),
        CondMode::SingleVector => {
            let id = class_id.ok_or_else(|| {
                CliError::Runtime("vector-conditioned model needs a class id".into())
            })?;
            Ok(model.encode_vector(id)?)
        }
        CondMode::TokenGrid => {
            let img = view.ok_or_else(|| {
                CliError::Runtime("grid-conditioned model needs a rendered view".into())
            })?;
            Ok(model.encode_view(img)?)
        }
    }
}

/// Draws one cloud from a diffusion model with classifier-free guidance.
/// `low` must be given exactly when the model is an upsampler, and the
/// upsampler's output is only the generated remainder — the caller
/// concatenates it after the conditioning points.
pub fn sample_stage(
    model: &PointDenoiser<f32>,
    schedule: &NoiseSchedule,
    sampler: &SamplerSection,
    cond: Conditioning<f32>,
    low: Option<Array2<f32>>,
    rng: &mut impl Rng,
) -> CResult<Array2<f32>> {
    let upsampler = model.config.is_upsampler;
    let shape = (model.config.point_count, 6);
    let cloud = match sampler.method {
        SamplerMethod::Heun => {
            let guided = GuidedModel::new(model, cond, low, sampler.guidance_scale)?;
            let heun = heun_for(sampler, upsampler);
            let mut bridge = DiscreteBridge::new(guided, schedule);
            heun_sample(&mut bridge, shape, &heun, rng)?
        }
        SamplerMethod::Ddpm => {
            let mut guided = GuidedModel::new(model, cond, low, sampler.guidance_scale)?;
            ddpm_sample(&mut guided, shape, schedule, rng)?
        }
    };
    Ok(cloud)
}
