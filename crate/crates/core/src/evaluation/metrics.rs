use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nets::FeatureNetwork;
use crate::numcore::Tensor;
use crate::rng;

/// Squared 1-D Wasserstein-2 distance between two sorted empirical samples
/// of possibly different sizes, by exact quantile matching.
pub fn w2_squared_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    // quantile levels are tracked in units of 1 / (n m), so ties are exact
    let (mut i, mut j, mut u) = (0, 0, 0);
    let mut acc = 0.0;
    while i < n && j < m {
        let (ea, eb) = ((i + 1) * m, (j + 1) * n);
        let next = ea.min(eb);
        let d = a[i] - b[j];
        acc += (next - u) as f64 * d * d;
        u = next;
        if ea == next {
            i += 1;
        }
        if eb == next {
            j += 1;
        }
    }
    acc / (n * m) as f64
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Input(format!("{what}: empty point set")));
    }
    if a.cols() != b.cols() {
        return Err(Error::Input(format!("{what}: dimensions {} and {} differ", a.cols(), b.cols())));
    }
    Ok(())
}

/// Random orthonormal frames totalling at least `n_proj` directions.
pub fn projection_frames(dim: usize, n_proj: usize, seed: u64) -> Vec<Vec<f64>> {
    let frames = n_proj.div_ceil(dim).max(1);
    let mut r = rng::stream(seed, "sliced-w2");
    let mut dirs = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        let m = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut r));
        let q = m.qr().q();
        for c in 0..dim {
            dirs.push(q.column(c).iter().copied().collect());
        }
    }
    dirs
}

/// Sliced Wasserstein-2 distance, scaled by the dimension so that it
/// matches the full W2 distance for translations:
/// `sqrt(d * mean_p W2^2(<A, p>, <B, p>))` over random orthonormal frames.
pub fn sliced_w2(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    check_pair(a, b, "sliced_w2")?;
    if n_proj == 0 {
        return Err(Error::Config("n_proj must be >= 1".into()));
    }
    let d = a.cols();
    let dirs = projection_frames(d, n_proj, seed);
    let project = |x: &Tensor, p: &[f64]| {
        let mut v: Vec<f64> = (0..x.rows())
            .map(|r| x.row_slice(r).iter().zip(p).map(|(u, w)| u * w).sum())
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let per: Vec<f64> = dirs
        .iter()
        .map(|p| w2_squared_sorted(&project(a, p), &project(b, p)))
        .collect();
    let mean = crate::numcore::pairwise_sum(&per) / per.len() as f64;
    Ok((d as f64 * mean).max(0.0).sqrt())
}

fn mean_cov(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mu = x.col_means().into_data();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..n {
        let row = x.row_slice(r);
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Added to both covariance diagonals before taking square roots.
pub const FFD_DIAG_REG: f64 = 1e-6;

fn frechet_one_way(mu_a: &[f64], ca: &DMatrix<f64>, mu_b: &[f64], cb: &DMatrix<f64>) -> f64 {
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = sym_sqrt(ca);
    let cross = sym_sqrt(&(&sa * cb * &sa));
    mean_term + ca.trace() + cb.trace() - 2.0 * cross.trace()
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn ffd(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "ffd")?;
    let d = a.cols();
    if a.rows() < d + 1 || b.rows() < d + 1 {
        return Err(Error::Input(format!("ffd needs at least {} points per set", d + 1)));
    }
    let (mu_a, mut ca) = mean_cov(a);
    let (mu_b, mut cb) = mean_cov(b);
    for i in 0..d {
        ca[(i, i)] += FFD_DIAG_REG;
        cb[(i, i)] += FFD_DIAG_REG;
    }
    // both orders, so swapping the arguments gives the identical value
    let ab = frechet_one_way(&mu_a, &ca, &mu_b, &cb);
    let ba = frechet_one_way(&mu_b, &cb, &mu_a, &ca);
    Ok((0.5 * (ab + ba)).max(0.0))
}

/// Fraction of samples the frozen classifier assigns to their intended label.
pub fn cond_accuracy(samples: &Tensor, labels: Option<&[usize]>, classifier: &FeatureNetwork) -> Result<f64> {
    let labels = labels.ok_or_else(|| Error::Input("cond_accuracy needs conditioning labels".into()))?;
    if labels.len() != samples.rows() || labels.is_empty() {
        return Err(Error::Input(format!("{} labels for {} samples", labels.len(), samples.rows())));
    }
    let pred = classifier.classify(samples)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}
