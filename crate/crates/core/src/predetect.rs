//! Pre-detection of unchanged background pixels.
//!
//! Unsupervised slow feature analysis (USFA) finds projections along which
//! the centered difference of the two images varies least relative to the
//! images' own variance. The standardized energy of a pixel's difference in
//! those slow directions is its change score. A three-cluster scalar k-means
//! on the scores then isolates the lowest-score cluster, from which training
//! pairs for the predictors are drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsi::{IntensityMap, PixelMatrix};
use crate::linalg::{generalized_eigh, mean_cov, SymMatrix};
use crate::matrix::{dot, Matrix};
use crate::neural::SampleSet;

const SCORE_EPS: f64 = 1e-12;
const KMEANS_MAX_ITER: usize = 300;

/// How projected differences are scaled into a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Standardization {
    /// Each squared slow-feature difference is divided by its eigenvalue.
    EigenvalueDivision,
}

#[derive(Clone, Debug)]
pub struct UsfaModel {
    /// K×Q, one slow direction per row, ascending eigenvalue order.
    pub projection: Matrix,
    pub eigenvalues: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    /// Set when no eigenvalue was below 1 and only the smallest was kept.
    pub fallback: bool,
    pub standardization: Standardization,
}

impl UsfaModel {
    pub fn components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn bands(&self) -> usize {
        self.mean_x.len()
    }
}

fn check_pair(x: &PixelMatrix, y: &PixelMatrix) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::dims(format!(
            "image matrices are {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Fits the slow-feature transform: `cov(x−y)·w = λ·((cov(x)+cov(y))/2)·w`
/// after centering each image, keeping components with `λ < 1`.
pub fn usfa_fit(
    x: &PixelMatrix,
    y: &PixelMatrix,
    ridge: crate::linalg::Ridge,
) -> Result<UsfaModel> {
    check_pair(x, y)?;
    let sx = mean_cov(x)?;
    let sy = mean_cov(y)?;
    let diff = centered_difference(x, y, &sx.mean, &sy.mean);
    let a = mean_cov(&diff)?.cov;
    let q = x.cols();
    let b = SymMatrix::new(Matrix::from_fn(q, q, |i, j| {
        0.5 * (sx.cov.get(i, j) + sy.cov.get(i, j))
    }))?;
    let ridge = ridge.resolve(&b);
    let eig = generalized_eigh(&a, &b, ridge).map_err(|e| match e {
        Error::Numerical(msg) => Error::numerical(format!("degenerate image covariance: {msg}")),
        other => other,
    })?;

    let mut keep: Vec<usize> = (0..q).filter(|&k| eig.values[k] < 1.0).collect();
    let fallback = keep.is_empty();
    if fallback {
        keep.push(0);
    }
    let projection = Matrix::from_fn(keep.len(), q, |r, i| eig.vectors[(i, keep[r])]);
    Ok(UsfaModel {
        projection,
        eigenvalues: keep.iter().map(|&k| eig.values[k]).collect(),
        mean_x: sx.mean,
        mean_y: sy.mean,
        fallback,
        standardization: Standardization::EigenvalueDivision,
    })
}

fn centered_difference(x: &PixelMatrix, y: &PixelMatrix, mx: &[f64], my: &[f64]) -> Matrix {
    let mut d = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for (((o, a), b), (ma, mb)) in d
            .row_mut(i)
            .iter_mut()
            .zip(x.row(i))
            .zip(y.row(i))
            .zip(mx.iter().zip(my))
        {
            *o = (a - ma) - (b - mb);
        }
    }
    d
}

/// Per-pixel `Σ_k (p_k·((xᵢ−μx) − (yᵢ−μy)))² / max(λ_k, 1e-12)`.
pub fn usfa_intensity(
    model: &UsfaModel,
    x: &PixelMatrix,
    y: &PixelMatrix,
    shape: (usize, usize),
) -> Result<IntensityMap> {
    check_pair(x, y)?;
    if x.cols() != model.bands() {
        return Err(Error::dims(format!(
            "model fitted on {} bands, images have {}",
            model.bands(),
            x.cols()
        )));
    }
    if shape.0 * shape.1 != x.rows() {
        return Err(Error::dims(format!(
            "{} pixels do not fill {}x{}",
            x.rows(),
            shape.0,
            shape.1
        )));
    }
    let d = centered_difference(x, y, &model.mean_x, &model.mean_y);
    let scores = d
        .row_iter()
        .map(|di| {
            model
                .projection
                .row_iter()
                .zip(&model.eigenvalues)
                .map(|(p, &l)| {
                    let z = dot(p, di);
                    z * z / l.max(SCORE_EPS)
                })
                .sum()
        })
        .collect();
    IntensityMap::new(shape.0, shape.1, scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Strictly ascending.
    pub centers: Vec<f64>,
    /// Index into `centers` for every input value.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Linear interpolation between order statistics; `p` in `[0, 1]`.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centers.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Lloyd's algorithm on scalars with centers seeded at the `(2j+1)/(2k)`
/// quantiles. Stops when assignments stop changing or after 300 passes.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("k-means input has non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::invalid(format!(
            "{} distinct values cannot form {k} clusters",
            distinct.len()
        )));
    }

    let mut centers: Vec<f64> = (0..k)
        .map(|j| quantile_sorted(&sorted, (2 * j + 1) as f64 / (2 * k) as f64))
        .collect();
    let mut assignments = vec![usize::MAX; values.len()];
    let mut iterations = 0;

    loop {
        let mut changed = false;
        for (a, &v) in assignments.iter_mut().zip(values) {
            let j = nearest(&centers, v);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed || iterations == KMEANS_MAX_ITER {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &v) in assignments.iter().zip(values) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        // an empty cluster takes over the point worst served by its center
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = values
                    .iter()
                    .zip(&assignments)
                    .enumerate()
                    .filter(|(_, (_, &a))| counts[a] > 1)
                    .map(|(i, (&v, &a))| (i, (v - centers[a]).abs()))
                    .fold(
                        (usize::MAX, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
                if far != usize::MAX {
                    counts[assignments[far]] -= 1;
                    centers[j] = values[far];
                    assignments[far] = j;
                    counts[j] = 1;
                }
            }
        }
    }

    // relabel so centers ascend
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let mut rank = vec![0; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    Ok(ClusterResult {
        centers: order.iter().map(|&j| centers[j]).collect(),
        assignments: assignments.iter().map(|&a| rank[a]).collect(),
        iterations,
    })
}

/// `min(10000, ⌈0.06·M⌉)`.
pub fn default_sample_count(pixels: usize) -> usize {
    ((0.06 * pixels as f64).ceil() as usize).clamp(1, 10_000)
}

/// Draws up to `count` aligned pairs, uniformly without replacement, from the
/// pixels in the lowest-intensity cluster of a three-way k-means split.
/// Returned indices are sorted.
pub fn select_samples(
    x: &PixelMatrix,
    y: &PixelMatrix,
    intensity: &IntensityMap,
    count: usize,
    seed: u64,
) -> Result<SampleSet> {
    check_pair(x, y)?;
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if intensity.values().len() != x.rows() {
        return Err(Error::dims(format!(
            "intensity map has {} pixels, images have {}",
            intensity.values().len(),
            x.rows()
        )));
    }
    let clusters = kmeans_1d(intensity.values(), 3)?;
    let pool = clusters.members(0);
    if pool.is_empty() {
        return Err(Error::numerical("background cluster is empty"));
    }
    let n = count.min(pool.len());
    if n < count {
        log::warn!(
            "requested {count} samples but the background pool holds {}; using all of it",
            pool.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    indices.sort_unstable();
    SampleSet::with_indices(x.select_rows(&indices), y.select_rows(&indices), indices)
}
