//! Sample-quality measures in the classifier's feature space.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sketch::NoisyClassifier;
use crate::tensor::Tensor;

const EIGEN_FLOOR: f64 = 1e-10;

fn rows_cols(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(Error::Shape {
            site: format!("{what} feature matrix"),
            expected: vec![0, 0],
            got: s.to_vec(),
        }),
    }
}

fn matrix(t: &Tensor) -> DMatrix<f64> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_slice(n, d, t.data())
}

/// Sample mean and unbiased covariance of the rows.
fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n - 1.0);
    (mu, cov)
}

/// Square root of a symmetric positive semidefinite matrix, small or
/// negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| if v < EIGEN_FLOOR { 0.0 } else { v.sqrt() });
    let trace = roots.sum();
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), trace)
}

/// Frechet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(real: &Tensor, fake: &Tensor) -> Result<f64> {
    let (nr, d) = rows_cols(real, "real")?;
    let (nf, df) = rows_cols(fake, "fake")?;
    if d != df {
        return Err(Error::Shape {
            site: "fake feature matrix".into(),
            expected: vec![nf, d],
            got: fake.shape().to_vec(),
        });
    }
    if nr <= d || nf <= d {
        return Err(Error::InvalidArgument(format!(
            "Frechet distance in {d} dimensions needs at least {} rows per set, got {nr} and {nf}",
            d + 1
        )));
    }
    let (mr, cr) = moments(&matrix(real));
    let (mf, cf) = moments(&matrix(fake));
    let (root_r, _) = psd_sqrt(&cr);
    let (_, cross) = psd_sqrt(&(&root_r * &cf * &root_r));
    let fd = (mr - mf).norm_squared() + cr.trace() + cf.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::NonFinite("Frechet distance".into()));
    }
    Ok(fd.max(0.0))
}

/// Exponentiated mean KL divergence between per-image class probabilities
/// and their marginal, averaged over contiguous splits.
pub fn inception_score(probs: &Tensor, splits: usize) -> Result<f64> {
    let (n, k) = rows_cols(probs, "probability")?;
    if splits == 0 || n < splits * 10 {
        return Err(Error::InvalidArgument(format!(
            "inception score over {splits} splits needs at least {} images, got {n}",
            splits.max(1) * 10
        )));
    }
    let p = probs.data();
    let xlogy = |x: f64, y: f64| if x > 0.0 { x * (x / y).ln() } else { 0.0 };
    let mut total = 0.0;
    for s in 0..splits {
        let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
        let m = (hi - lo) as f64;
        let marginal: Vec<f64> = (0..k)
            .map(|c| (lo..hi).map(|i| p[i * k + c]).sum::<f64>() / m)
            .collect();
        let kl: f64 = (lo..hi)
            .map(|i| (0..k).map(|c| xlogy(p[i * k + c], marginal[c])).sum::<f64>())
            .sum::<f64>()
            / m;
        total += kl.exp();
    }
    Ok(total / splits as f64)
}

fn distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| (a.row(i) - b.row(j)).norm())
}

/// Distance from each row to its `k`-th nearest other row.
fn knn_radii(x: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let d = distances(x, x);
    (0..x.nrows())
        .map(|i| {
            let mut row: Vec<f64> = (0..x.nrows()).filter(|&j| j != i).map(|j| d[(i, j)]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect()
}

/// Fraction of `probe` rows inside some `manifold` row's k-NN ball.
fn coverage(manifold: &DMatrix<f64>, probe: &DMatrix<f64>, k: usize) -> f64 {
    let radii = knn_radii(manifold, k);
    let d = distances(probe, manifold);
    let hits = (0..probe.nrows())
        .filter(|&i| (0..manifold.nrows()).any(|j| d[(i, j)] <= radii[j]))
        .count();
    hits as f64 / probe.nrows() as f64
}

/// k-NN manifold precision and recall.
pub fn precision_recall(real: &Tensor, fake: &Tensor, k: usize) -> Result<(f64, f64)> {
    let (nr, d) = rows_cols(real, "real")?;
    let (nf, df) = rows_cols(fake, "fake")?;
    if d != df {
        return Err(Error::Shape {
            site: "fake feature matrix".into(),
            expected: vec![nf, d],
            got: fake.shape().to_vec(),
        });
    }
    if k == 0 || nr <= k || nf <= k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs more than k rows per set, got {nr} and {nf}"
        )));
    }
    let (r, f) = (matrix(real), matrix(fake));
    Ok((coverage(&r, &f, k), coverage(&f, &r, k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub fd: f64,
    pub is_score: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub k: usize,
}

impl MetricsReport {
    /// All four measures for image batches `[N, 1, 32, 32]`.
    pub fn evaluate(
        real: &Tensor,
        fake: &Tensor,
        classifier: &NoisyClassifier,
        k: usize,
        splits: usize,
    ) -> Result<Self> {
        let fr = classifier.features(real)?;
        let ff = classifier.features(fake)?;
        let (precision, recall) = precision_recall(&fr, &ff, k)?;
        Ok(Self {
            fd: frechet_distance(&fr, &ff)?,
            is_score: inception_score(&classifier.probabilities(fake, 0)?, splits)?,
            precision,
            recall,
            n_real: real.batch(),
            n_fake: fake.batch(),
            k,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>12} {:>10} {:>12} {:>10} {:>7} {:>7} {:>3}", "FID(lower)", "IS(higher)", "Precision", "Recall", "n_real", "n_fake", "k")?;
        writeln!(
            f,
            "{:>12.6} {:>10.6} {:>12.6} {:>10.6} {:>7} {:>7} {:>3}",
            self.fd, self.is_score, self.precision, self.recall, self.n_real, self.n_fake, self.k
        )
    }
}
