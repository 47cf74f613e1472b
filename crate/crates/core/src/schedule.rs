//! Variance schedules and the forward (noising) process.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// The arguments a schedule was built from; enough to rebuild it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub const DEFAULT_STEPS: usize = 200;
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    /// Chosen so that the terminal signal level stays below 1% at 200 steps.
    pub const DEFAULT_BETA_END: f64 = 0.05;
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: Self::DEFAULT_STEPS,
            beta_start: Self::DEFAULT_BETA_START,
            beta_end: Self::DEFAULT_BETA_END,
        }
    }
}

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{i<=t} alpha_i`
/// for `t = 1..=T`, with `alpha_bar_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S: Scalar = f64> {
    spec: ScheduleSpec,
    betas: Vec<S>,
    alpha_bars: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_spec(ScheduleSpec {
            kind,
            steps,
            beta_start,
            beta_end,
        })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            kind,
            steps,
            beta_start,
            beta_end,
        } = spec;
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas_f: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let offset = 0.008;
                let f = |t: f64| {
                    (((t / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_start, 0.999))
                    .collect()
            }
        };
        let betas: Vec<S> = betas_f.iter().map(|&b| S::lit(b)).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(S::one());
        for &b in &betas {
            let prev = *alpha_bars.last().expect("nonempty");
            alpha_bars.push(prev * (S::one() - b));
        }
        if alpha_bars.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument(
                "alpha_bar must be strictly decreasing".into(),
            ));
        }
        Ok(Self {
            spec,
            betas,
            alpha_bars,
        })
    }

    /// Default schedule: linear over 200 steps. Panics if the terminal
    /// signal level exceeds 1%.
    pub fn standard() -> Self {
        let s = Self::from_spec(ScheduleSpec::default()).expect("default schedule is valid");
        assert!(
            s.alpha_bar(s.steps()).as_f64() <= 0.01,
            "default schedule must end near pure noise"
        );
        s
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> S {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        S::one() - self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        x0.axpby(ab.sqrt(), eps, (S::one() - ab).sqrt())
    }

    /// Mean and variance of `q(x_t | x_0)`.
    pub fn marginal_stats(&self, x0: &Tensor<S>, t: usize) -> Result<(Tensor<S>, S)> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok((x0.scale(ab.sqrt()), S::one() - ab))
    }

    /// One forward kernel `q(x_t | x_{t-1})` for `t` in `1..=T`.
    pub fn q_step(&self, x_prev: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        if t == 0 {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        self.check_t(t)?;
        x_prev.axpby(self.alpha(t).sqrt(), eps, self.beta(t).sqrt())
    }

    /// Plain-text table of `t beta_t alpha_bar_t`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# kind={} steps={} beta_start={:e} beta_end={:e}\n# t beta alpha_bar\n",
            self.spec.kind, self.spec.steps, self.spec.beta_start, self.spec.beta_end
        );
        for t in 1..=self.steps() {
            let _ = writeln!(out, "{t} {:.12e} {:.12e}", self.beta(t).as_f64(), self.alpha_bar(t).as_f64());
        }
        out
    }
}

/// Strictly increasing subsequence of `1..=T` ending at `T`, used for
/// accelerated sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepMap {
    steps: Vec<usize>,
}

impl TimestepMap {
    pub fn new(steps: Vec<usize>, total: usize) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::InvalidArgument(
                "timestep map needs at least two entries".into(),
            ));
        }
        if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "timestep map must be strictly increasing within 1..=T".into(),
            ));
        }
        if *steps.last().expect("nonempty") != total {
            return Err(Error::InvalidArgument(format!(
                "timestep map must end at T={total}"
            )));
        }
        Ok(Self { steps })
    }

    /// `count` evenly spaced timesteps ending at `total`.
    pub fn evenly_spaced(total: usize, count: usize) -> Result<Self> {
        if count > total {
            return Err(Error::InvalidArgument(format!(
                "{count} sampling steps exceed schedule length {total}"
            )));
        }
        let steps = (1..=count)
            .map(|i| ((i * total) as f64 / count as f64).round() as usize)
            .collect();
        Self::new(steps, total)
    }

    /// Every timestep `1..=T`.
    pub fn full(total: usize) -> Result<Self> {
        Self::new((1..=total).collect(), total)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.steps.last().expect("nonempty")
    }

    /// `(t, t_prev)` pairs from `T` down to `0`.
    pub fn descending_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.steps.len());
        for i in (0..self.steps.len()).rev() {
            let prev = if i == 0 { 0 } else { self.steps[i - 1] };
            out.push((self.steps[i], prev));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_linear() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn two_step_linear_products() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_bounds() {
        for (a, b) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (-0.1, 0.5)] {
            assert!(NoiseSchedule::<f64>::new(ScheduleKind::Linear, 10, a, b).is_err());
        }
        assert!(NoiseSchedule::<f64>::new(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing_for_both_kinds() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::<f64>::new(kind, 200, 1e-4, 0.05).unwrap();
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar(200) < s.alpha_bar(1));
        }
    }

    #[test]
    fn standard_schedule_ends_near_noise() {
        let s = NoiseSchedule::<f64>::standard();
        assert_eq!(s.steps(), 200);
        assert!(s.alpha_bar(200) <= 0.01);
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        let x0 = Tensor::from_vec(vec![0.3, -0.7]);
        let eps = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(s.q_sample(&x0, 0, &eps).unwrap(), x0);
        let z = Tensor::zeros(vec![2]);
        let out = s.q_sample(&z, 2, &eps).unwrap();
        let c = (1.0f64 - 0.72).sqrt();
        assert!((out.data()[1] - 2.0 * c).abs() < 1e-15);
        assert!(s.q_sample(&x0, 3, &eps).is_err());
    }

    #[test]
    fn q_sample_hand_value() {
        // alpha_bar = 0.25 at t = 2 for betas (0.5, 0.5).
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 2, 0.5, 0.5).unwrap();
        let out = s
            .q_sample(&Tensor::scalar(2.0), 2, &Tensor::scalar(1.0))
            .unwrap();
        assert!((out.item() - 1.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn marginal_stats_examples() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        let x0 = Tensor::scalar(1.0);
        let (m, v) = s.marginal_stats(&x0, 0).unwrap();
        assert_eq!((m.item(), v), (1.0, 0.0));
        let (m, v) = s.marginal_stats(&x0, 2).unwrap();
        assert!((m.item() - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((v - 0.28).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_monte_carlo_at_half_horizon() {
        let s = NoiseSchedule::<f64>::standard();
        let t = s.steps() / 2;
        let x0 = Tensor::scalar(0.8);
        let (mean, var) = s.marginal_stats(&x0, t).unwrap();
        let n = 100_000;
        let eps = Tensor::<f64>::randn(vec![n], &mut ChaCha8Rng::seed_from_u64(3));
        let xs = s.q_sample(&Tensor::full(vec![n], 0.8), t, &eps).unwrap();
        let m = xs.mean();
        let v = xs.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        let tol = 3.0 / (n as f64).sqrt();
        assert!((m - mean.item()).abs() / var.sqrt() <= tol, "{m} vs {}", mean.item());
        assert!((v - var).abs() / var <= tol * 2f64.sqrt(), "{v} vs {var}");
    }

    #[test]
    fn timestep_maps() {
        let m = TimestepMap::evenly_spaced(200, 20).unwrap();
        assert_eq!(m.len(), 20);
        assert_eq!(m.last(), 200);
        assert_eq!(m.steps()[0], 10);
        assert_eq!(TimestepMap::full(5).unwrap().descending_pairs(), vec![(5, 4), (4, 3), (3, 2), (2, 1), (1, 0)]);
        assert!(TimestepMap::evenly_spaced(10, 11).is_err());
        assert!(TimestepMap::new(vec![3], 3).is_err());
        assert!(TimestepMap::new(vec![1, 1, 3], 3).is_err());
        assert!(TimestepMap::new(vec![1, 2], 3).is_err());
    }

    #[test]
    fn text_dump_has_one_row_per_step() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 5, 0.1, 0.2).unwrap();
        let rows = s.to_text().lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 5);
    }

    #[test]
    fn single_precision_schedule() {
        let s = NoiseSchedule::<f32>::standard();
        assert!(s.alpha_bar(200) < 0.01);
    }
}
