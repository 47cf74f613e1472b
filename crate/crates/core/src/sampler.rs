//! Reverse generation with the implicit (DDIM) update, classifier guidance
//! and deterministic inversion of images into latents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, TimestepMap};
use crate::tensor::Tensor;

/// Anything that predicts the injected noise `eps(x_t, t, y)`.
pub trait EpsilonModel<S: Scalar> {
    /// Shape of a single sample, without the batch axis.
    fn sample_shape(&self) -> Vec<usize>;

    /// Noise prediction for a batch `x_t [N, ...]` at timestep `t`.
    fn predict_epsilon(&self, x_t: &Tensor<S>, t: usize, labels: Option<&[usize]>)
        -> Result<Tensor<S>>;
}

/// A noise-aware classifier `p(y | x_t, t)` that can report the gradient of
/// its log-probability with respect to the input.
pub trait GuidanceClassifier<S: Scalar> {
    fn num_classes(&self) -> usize;

    /// `grad_{x_t} log p(labels[n] | x_t[n], t)` for every batch item.
    fn grad_log_prob(&self, x_t: &Tensor<S>, t: usize, labels: &[usize]) -> Result<Tensor<S>>;
}

impl<S: Scalar, M: EpsilonModel<S> + ?Sized> EpsilonModel<S> for &M {
    fn sample_shape(&self) -> Vec<usize> {
        (**self).sample_shape()
    }

    fn predict_epsilon(&self, x_t: &Tensor<S>, t: usize, labels: Option<&[usize]>) -> Result<Tensor<S>> {
        (**self).predict_epsilon(x_t, t, labels)
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Debug)]
pub struct ZeroEpsilon {
    pub shape: Vec<usize>,
}

impl<S: Scalar> EpsilonModel<S> for ZeroEpsilon {
    fn sample_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn predict_epsilon(&self, x_t: &Tensor<S>, _t: usize, _labels: Option<&[usize]>) -> Result<Tensor<S>> {
        Ok(Tensor::zeros(x_t.shape().to_vec()))
    }
}

/// Coefficients of one implicit update from `alpha_bar_t` to
/// `alpha_bar_prev`: `x_prev = cx * x_t + ce * eps + sigma * z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients<S> {
    pub cx: S,
    pub ce: S,
    pub sigma: S,
}

pub fn ddim_coefficients<S: Scalar>(alpha_bar_t: S, alpha_bar_prev: S, eta: S) -> StepCoefficients<S> {
    let one = S::one();
    let sigma = if eta == S::zero() {
        S::zero()
    } else {
        eta * ((one - alpha_bar_prev) / (one - alpha_bar_t)).sqrt()
            * (one - alpha_bar_t / alpha_bar_prev).max(S::zero()).sqrt()
    };
    let cx = (alpha_bar_prev / alpha_bar_t).sqrt();
    let ce = (one - alpha_bar_prev - sigma * sigma).max(S::zero()).sqrt()
        - (alpha_bar_prev * (one - alpha_bar_t) / alpha_bar_t).sqrt();
    StepCoefficients { cx, ce, sigma }
}

/// One reverse step from `t` to `t_prev < t`.
///
/// With `eta = 0` this is the deterministic update; `noise` is only read
/// when `eta > 0`.
pub fn ddim_step<S: Scalar>(
    x_t: &Tensor<S>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<S>,
    sched: &NoiseSchedule<S>,
    eta: S,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "ddim step needs t_prev < t, got t={t}, t_prev={t_prev}"
        )));
    }
    sched.check_t(t)?;
    if eta < S::zero() || eta > S::one() {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
    }
    let c = ddim_coefficients(sched.alpha_bar(t), sched.alpha_bar(t_prev), eta);
    let mut out = x_t.axpby(c.cx, eps_hat, c.ce)?;
    if c.sigma > S::zero() {
        let z = noise.ok_or_else(|| Error::InvalidArgument("stochastic step needs noise".into()))?;
        out = out.axpby(S::one(), z, c.sigma)?;
    }
    Ok(out)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::InvalidLabel { label, classes }),
        None => Ok(()),
    }
}

/// `eps(x_t, t) - scale * sqrt(1 - alpha_bar_t) * grad log p(y | x_t, t)`.
///
/// `scale = 0` returns the unguided prediction untouched.
#[allow(clippy::too_many_arguments)]
pub fn guided_epsilon<S: Scalar>(
    x_t: &Tensor<S>,
    t: usize,
    labels: &[usize],
    eps_model: &dyn EpsilonModel<S>,
    model_labels: Option<&[usize]>,
    classifier: &dyn GuidanceClassifier<S>,
    scale: S,
    sched: &NoiseSchedule<S>,
) -> Result<Tensor<S>> {
    check_labels(labels, classifier.num_classes())?;
    let eps = eps_model.predict_epsilon(x_t, t, model_labels)?;
    if scale == S::zero() {
        return Ok(eps);
    }
    let grad = classifier.grad_log_prob(x_t, t, labels)?;
    eps.axpby(S::one(), &grad, -scale * (S::one() - sched.alpha_bar(t)).sqrt())
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub timestep_map: TimestepMap,
    /// Stochasticity in `[0, 1]`; zero is fully deterministic.
    pub eta: f64,
    pub guidance_scale: f64,
    pub target_class: Option<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn deterministic(timestep_map: TimestepMap, seed: u64) -> Self {
        Self {
            timestep_map,
            eta: 0.0,
            guidance_scale: 1.0,
            target_class: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be finite and nonnegative, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Latents visited during one reverse run, from `T` down to `0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S: Scalar = f64> {
    pub states: Vec<(usize, Tensor<S>)>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput<S: Scalar = f64> {
    pub samples: Tensor<S>,
    pub trajectory: Option<Trajectory<S>>,
}

/// Optional guidance source for [`sample`].
pub type Guide<'a, S> = Option<&'a dyn GuidanceClassifier<S>>;

/// Draws `n` latents from the configured seed and runs the reverse process.
pub fn sample<S: Scalar>(
    eps_model: &dyn EpsilonModel<S>,
    guide: Guide<'_, S>,
    sched: &NoiseSchedule<S>,
    cfg: &SamplerConfig,
    n: usize,
    record: bool,
) -> Result<SampleOutput<S>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shape = vec![n];
    shape.extend(eps_model.sample_shape());
    let x_t = Tensor::randn(shape, &mut rng);
    run_reverse(eps_model, guide, sched, cfg, x_t, &mut rng, record)
}

/// Runs the reverse process from a given latent batch `x_T`.
pub fn sample_from<S: Scalar>(
    eps_model: &dyn EpsilonModel<S>,
    guide: Guide<'_, S>,
    sched: &NoiseSchedule<S>,
    cfg: &SamplerConfig,
    x_t: Tensor<S>,
    record: bool,
) -> Result<SampleOutput<S>> {
    // offset the stream so stochastic steps never reuse latent draws
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_1a7e47);
    run_reverse(eps_model, guide, sched, cfg, x_t, &mut rng, record)
}

fn run_reverse<S: Scalar>(
    eps_model: &dyn EpsilonModel<S>,
    guide: Guide<'_, S>,
    sched: &NoiseSchedule<S>,
    cfg: &SamplerConfig,
    mut x: Tensor<S>,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<SampleOutput<S>> {
    cfg.validate()?;
    if cfg.timestep_map.last() != sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "timestep map ends at {} but schedule has {} steps",
            cfg.timestep_map.last(),
            sched.steps()
        )));
    }
    let n = x.batch();
    let labels = cfg.target_class.map(|y| vec![y; n]);
    let guided = match (cfg.target_class, guide) {
        (Some(_), Some(g)) if cfg.guidance_scale != 0.0 => Some(g),
        (Some(_), None) if cfg.guidance_scale != 0.0 => {
            return Err(Error::InvalidArgument(
                "guidance toward a target class needs a classifier".into(),
            ))
        }
        _ => None,
    };
    let eta = S::lit(cfg.eta);
    let mut states = record.then(|| vec![(sched.steps(), x.clone())]);
    for (t, t_prev) in cfg.timestep_map.descending_pairs() {
        let eps = match (guided, &labels) {
            (Some(g), Some(l)) => guided_epsilon(
                &x,
                t,
                l,
                eps_model,
                labels.as_deref(),
                g,
                S::lit(cfg.guidance_scale),
                sched,
            )?,
            _ => eps_model.predict_epsilon(&x, t, labels.as_deref())?,
        };
        let noise = (cfg.eta > 0.0).then(|| Tensor::randn(x.shape().to_vec(), &mut *rng));
        x = ddim_step(&x, t, t_prev, &eps, sched, eta, noise.as_ref())?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("reverse step {t} -> {t_prev}")));
        }
        if let Some(s) = states.as_mut() {
            s.push((t_prev, x.clone()));
        }
    }
    Ok(SampleOutput {
        samples: x,
        trajectory: states.map(|states| Trajectory { states }),
    })
}

/// Deterministically encodes `x0` into a latent at `T` by running the
/// implicit update towards increasing noise.
///
/// Each step from level `t_lo` to `t_hi` queries the model at `t_hi`, the
/// timestep whose reverse step it undoes.
pub fn invert<S: Scalar>(
    x0: &Tensor<S>,
    eps_model: &dyn EpsilonModel<S>,
    sched: &NoiseSchedule<S>,
    timestep_map: &TimestepMap,
    labels: Option<&[usize]>,
) -> Result<Tensor<S>> {
    if timestep_map.last() != sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "timestep map ends at {} but schedule has {} steps",
            timestep_map.last(),
            sched.steps()
        )));
    }
    let mut x = x0.clone();
    let mut lo = 0;
    for &hi in timestep_map.steps() {
        let eps = eps_model.predict_epsilon(&x, hi, labels)?;
        // the forward transfer uses the same coefficient formula with the
        // roles of the two levels exchanged
        let c = ddim_coefficients(sched.alpha_bar(lo), sched.alpha_bar(hi), S::zero());
        x = x.axpby(c.cx, &eps, c.ce)?;
        lo = hi;
    }
    Ok(x)
}
