//! Closed-form noise predictors and classifiers for Gaussian data.
//!
//! When the data distribution is Gaussian, or a mixture of isotropic
//! Gaussians, the optimal noise prediction and the noisy class posterior are
//! known exactly. These models stand in for trained networks whenever a
//! sampler property has to be checked against ground truth.

use crate::error::{Error, Result};
use crate::sampler::{EpsilonModel, GuidanceClassifier};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Exact `E[eps | x_t]` for data `x0 ~ N(mean, std^2)` per coordinate.
pub struct GaussianScore<S: Scalar> {
    pub mean: f64,
    pub std: f64,
    pub dim: usize,
    pub schedule: NoiseSchedule<S>,
}

impl<S: Scalar> EpsilonModel<S> for GaussianScore<S> {
    fn sample_shape(&self) -> Vec<usize> {
        vec![self.dim]
    }

    fn predict_epsilon(&self, x_t: &Tensor<S>, t: usize, _labels: Option<&[usize]>) -> Result<Tensor<S>> {
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let one = S::one();
        let m = S::lit(self.mean);
        let var0 = S::lit(self.std * self.std);
        let total = ab * var0 + one - ab;
        let c = (one - ab).sqrt() / total;
        let shift = ab.sqrt() * m;
        Ok(x_t.map(|x| c * (x - shift)))
    }
}

/// Equal-weight mixture of isotropic Gaussians `N(mean_k, std^2 I)`.
pub struct GaussianMixture<S: Scalar> {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub schedule: NoiseSchedule<S>,
}

impl<S: Scalar> GaussianMixture<S> {
    pub fn new(means: Vec<Vec<f64>>, std: f64, schedule: NoiseSchedule<S>) -> Result<Self> {
        let dim = means.first().map(|m| m.len()).unwrap_or(0);
        if means.len() < 2 || dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidArgument(
                "mixture needs at least two equal-length component means".into(),
            ));
        }
        Ok(Self {
            means,
            std,
            schedule,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Noisy-marginal variance and per-row posteriors `p(k | x_t)`.
    fn posteriors(&self, x_t: &Tensor<S>, t: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        self.schedule.check_t(t)?;
        let d = self.dim();
        if x_t.len() % d != 0 || x_t.sample_shape().iter().product::<usize>() != d {
            return Err(Error::Shape {
                site: "mixture input".into(),
                expected: vec![x_t.batch(), d],
                got: x_t.shape().to_vec(),
            });
        }
        let ab = self.schedule.alpha_bar(t).as_f64();
        let var = ab * self.std * self.std + 1.0 - ab;
        let rows = x_t
            .data()
            .chunks_exact(d)
            .map(|row| {
                let logs: Vec<f64> = self
                    .means
                    .iter()
                    .map(|m| {
                        -row.iter()
                            .zip(m)
                            .map(|(&x, &mu)| (x.as_f64() - ab.sqrt() * mu).powi(2))
                            .sum::<f64>()
                            / (2.0 * var)
                    })
                    .collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|v| v / z).collect()
            })
            .collect();
        Ok((var, rows))
    }

    /// `log p(y | x_t)` for each row.
    pub fn log_posterior(&self, x_t: &Tensor<S>, t: usize, labels: &[usize]) -> Result<Vec<f64>> {
        let (_, post) = self.posteriors(x_t, t)?;
        Ok(post.iter().zip(labels).map(|(p, &y)| p[y].ln()).collect())
    }

    /// Index of the nearest component mean for each row.
    pub fn nearest_component(&self, x: &Tensor<S>) -> Vec<usize> {
        x.data()
            .chunks_exact(self.dim())
            .map(|row| {
                let dist = |m: &Vec<f64>| {
                    row.iter()
                        .zip(m)
                        .map(|(&a, &b)| (a.as_f64() - b).powi(2))
                        .sum::<f64>()
                };
                (0..self.means.len())
                    .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
                    .expect("at least two components")
            })
            .collect()
    }
}

impl<S: Scalar> EpsilonModel<S> for GaussianMixture<S> {
    fn sample_shape(&self) -> Vec<usize> {
        vec![self.dim()]
    }

    fn predict_epsilon(&self, x_t: &Tensor<S>, t: usize, _labels: Option<&[usize]>) -> Result<Tensor<S>> {
        let (var, post) = self.posteriors(x_t, t)?;
        let ab = self.schedule.alpha_bar(t).as_f64();
        let d = self.dim();
        let mut out = Vec::with_capacity(x_t.len());
        for (row, p) in x_t.data().chunks_exact(d).zip(&post) {
            for (j, &x) in row.iter().enumerate() {
                let centre: f64 = p.iter().zip(&self.means).map(|(w, m)| w * m[j]).sum();
                // eps = -sqrt(1 - ab) * score
                let score = -(x.as_f64() - ab.sqrt() * centre) / var;
                out.push(S::lit(-(1.0 - ab).sqrt() * score));
            }
        }
        Ok(Tensor::from_parts(x_t.shape().to_vec(), out))
    }
}

impl<S: Scalar> GuidanceClassifier<S> for GaussianMixture<S> {
    fn num_classes(&self) -> usize {
        self.means.len()
    }

    fn grad_log_prob(&self, x_t: &Tensor<S>, t: usize, labels: &[usize]) -> Result<Tensor<S>> {
        let (var, post) = self.posteriors(x_t, t)?;
        let ab = self.schedule.alpha_bar(t).as_f64();
        let d = self.dim();
        let mut out = Vec::with_capacity(x_t.len());
        for ((row, p), &y) in x_t.data().chunks_exact(d).zip(&post).zip(labels) {
            if y >= self.means.len() {
                return Err(Error::InvalidLabel {
                    label: y,
                    classes: self.means.len(),
                });
            }
            for j in 0..row.len() {
                let centre: f64 = p.iter().zip(&self.means).map(|(w, m)| w * m[j]).sum();
                out.push(S::lit(ab.sqrt() * (self.means[y][j] - centre) / var));
            }
        }
        Ok(Tensor::from_parts(x_t.shape().to_vec(), out))
    }
}
