//! Linear comparison detectors: Diff-RX, chronochrome (CC) and covariance
//! equalization (CE).
//!
//! CC and CE are affine predictors scored exactly like the neural ones: the
//! per-pixel mean squared residual, computed in both directions and fused by
//! the pixelwise minimum.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acda::{fuse_min, loss_map};
use crate::error::{Error, Result};
use crate::hsi::{check_same_dims, HyperCube, IntensityMap, PixelMatrix};
use crate::linalg::{self, Ridge};
use crate::matrix::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Cc,
    Ce,
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictorKind::Cc => "cc",
            PredictorKind::Ce => "ce",
        })
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc" => Ok(PredictorKind::Cc),
            "ce" => Ok(PredictorKind::Ce),
            other => Err(Error::invalid(format!(
                "unknown linear predictor `{other}`"
            ))),
        }
    }
}

/// `ŷ = gain·(x − mean_in) + mean_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPredictor {
    pub kind: PredictorKind,
    pub gain: Matrix,
    pub mean_in: Vec<f64>,
    pub mean_out: Vec<f64>,
}

impl LinearPredictor {
    pub fn predict(&self, x: &PixelMatrix) -> Result<PixelMatrix> {
        if x.cols() != self.mean_in.len() {
            return Err(Error::dims(format!(
                "predictor expects {} bands, got {}",
                self.mean_in.len(),
                x.cols()
            )));
        }
        let q_out = self.mean_out.len();
        let mut out = Matrix::zeros(x.rows(), q_out);
        out.as_mut_slice()
            .par_chunks_mut(q_out)
            .zip(x.as_slice().par_chunks(x.cols()))
            .for_each(|(o, xi)| {
                let centered: Vec<f64> = xi.iter().zip(&self.mean_in).map(|(a, m)| a - m).collect();
                for (k, ok) in o.iter_mut().enumerate() {
                    *ok = dot(self.gain.row(k), &centered) + self.mean_out[k];
                }
            });
        Ok(out)
    }
}

fn check_pair(x: &PixelMatrix, y: &PixelMatrix) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::dims(format!(
            "images are {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// RX on the difference image: squared Mahalanobis distance of each
/// `xᵢ − yᵢ` from the mean difference.
pub fn diff_rx(
    x: &PixelMatrix,
    y: &PixelMatrix,
    shape: (usize, usize),
    ridge: Ridge,
) -> Result<IntensityMap> {
    check_pair(x, y)?;
    if shape.0 * shape.1 != x.rows() {
        return Err(Error::dims(format!(
            "{} pixels do not fill {}x{}",
            x.rows(),
            shape.0,
            shape.1
        )));
    }
    let d = x.sub(y)?;
    let stats = linalg::mean_cov(&d)?;
    let centered = Matrix::from_fn(d.rows(), d.cols(), |i, j| d[(i, j)] - stats.mean[j]);
    // The quadratic form of a zero vector is zero whatever the inverse is.
    if centered.as_slice().iter().all(|&v| v == 0.0) {
        return IntensityMap::new(shape.0, shape.1, vec![0.0; x.rows()]);
    }
    let l = linalg::cholesky(&stats.cov, ridge.resolve(&stats.cov))?;
    let scores = centered
        .as_slice()
        .par_chunks(d.cols())
        .map(|row| {
            let mut z = row.to_vec();
            linalg::forward_substitute(&l, &mut z);
            z.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    IntensityMap::new(shape.0, shape.1, scores)
}

/// Least-squares affine regression of `y` on `x`:
/// `gain = Σ_yx·(Σ_xx + ridge·I)⁻¹`.
pub fn fit_cc(x: &PixelMatrix, y: &PixelMatrix, ridge: Ridge) -> Result<LinearPredictor> {
    check_pair(x, y)?;
    let sx = linalg::mean_cov(x)?;
    let mean_out = y.column_means();
    let sxy = linalg::cross_cov(x, y)?;
    // (Σ_xx + rI)⁻¹·Σ_xy is the transpose of the gain
    let gain_t = linalg::solve_spd(&sx.cov, &sxy, ridge.resolve(&sx.cov))?;
    Ok(LinearPredictor {
        kind: PredictorKind::Cc,
        gain: gain_t.transpose(),
        mean_in: sx.mean,
        mean_out,
    })
}

/// Covariance equalization: `gain = Σ_yy^{1/2}·(Σ_xx + ridge·I)^{-1/2}`.
pub fn fit_ce(x: &PixelMatrix, y: &PixelMatrix, ridge: Ridge) -> Result<LinearPredictor> {
    check_pair(x, y)?;
    let sx = linalg::mean_cov(x)?;
    let sy = linalg::mean_cov(y)?;
    let whiten = linalg::inv_sqrt(&sx.cov, ridge.resolve(&sx.cov))?;
    let color = linalg::sqrt_psd(&sy.cov)?;
    Ok(LinearPredictor {
        kind: PredictorKind::Ce,
        gain: color.as_matrix().matmul(whiten.as_matrix())?,
        mean_in: sx.mean,
        mean_out: sy.mean,
    })
}

pub fn fit(
    kind: PredictorKind,
    x: &PixelMatrix,
    y: &PixelMatrix,
    ridge: Ridge,
) -> Result<LinearPredictor> {
    match kind {
        PredictorKind::Cc => fit_cc(x, y, ridge),
        PredictorKind::Ce => fit_ce(x, y, ridge),
    }
}

/// Per-pixel mean squared error of predicting `y` from `x`.
pub fn baseline_map(
    pred: &LinearPredictor,
    x: &PixelMatrix,
    y: &PixelMatrix,
    shape: (usize, usize),
) -> Result<IntensityMap> {
    check_pair(x, y)?;
    loss_map(&pred.predict(x)?, y, shape)
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub forward: LinearPredictor,
    pub backward: LinearPredictor,
    /// Error of predicting Y from X.
    pub map_fwd: IntensityMap,
    /// Error of predicting X from Y.
    pub map_bwd: IntensityMap,
    pub fused: IntensityMap,
}

/// Fits `kind` in both directions and min-fuses the two residual maps.
pub fn run_baseline(
    kind: PredictorKind,
    x_cube: &HyperCube,
    y_cube: &HyperCube,
    ridge: Ridge,
) -> Result<BaselineRun> {
    check_same_dims(x_cube, y_cube)?;
    let shape = (x_cube.height(), x_cube.width());
    let x = x_cube.flatten();
    let y = y_cube.flatten();
    let forward = fit(kind, &x, &y, ridge)?;
    let backward = fit(kind, &y, &x, ridge)?;
    let map_fwd = baseline_map(&forward, &x, &y, shape)?;
    let map_bwd = baseline_map(&backward, &y, &x, shape)?;
    let fused = fuse_min(&map_fwd, &map_bwd)?;
    Ok(BaselineRun {
        forward,
        backward,
        map_fwd,
        map_bwd,
        fused,
    })
}

/// Diff-RX on two cubes.
pub fn run_diff_rx(x_cube: &HyperCube, y_cube: &HyperCube, ridge: Ridge) -> Result<IntensityMap> {
    check_same_dims(x_cube, y_cube)?;
    diff_rx(
        &x_cube.flatten(),
        &y_cube.flatten(),
        (x_cube.height(), x_cube.width()),
        ridge,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(m: usize, q: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, q, |_, _| rng.sample(StandardNormal))
    }

    /// Correlated Gaussian data: white noise through a random mixing matrix.
    fn correlated(m: usize, q: usize, seed: u64) -> Matrix {
        let z = gaussian(m, q, seed);
        let mix = gaussian(q, q, seed + 1000);
        z.matmul(&mix).unwrap()
    }

    fn residual_sq(pred: &Matrix, y: &Matrix) -> f64 {
        pred.sub(y).unwrap().frobenius_norm().powi(2)
    }

    #[test]
    fn diff_rx_identical_images_score_zero() {
        let x = gaussian(20, 3, 1);
        let map = diff_rx(&x, &x, (4, 5), Ridge::default()).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diff_rx_mean_score_is_band_count() {
        // mean Mahalanobis distance under the sample covariance equals Q
        // exactly; with Gaussian data this is the chi-square mean.
        let x = gaussian(4000, 2, 2);
        let y = gaussian(4000, 2, 3);
        let map = diff_rx(&x, &y, (40, 100), Ridge::Absolute(0.0)).unwrap();
        let mean = map.values().iter().sum::<f64>() / 4000.0;
        assert!((mean - 2.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn diff_rx_ignores_constant_offsets() {
        let x = gaussian(50, 3, 4);
        let y = gaussian(50, 3, 5);
        let shifted = Matrix::from_fn(50, 3, |i, j| y[(i, j)] + [1.5, -2.0, 7.0][j]);
        let a = diff_rx(&x, &y, (5, 10), Ridge::default()).unwrap();
        let b = diff_rx(&x, &shifted, (5, 10), Ridge::default()).unwrap();
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() < 1e-9 * u.max(1.0));
        }
    }

    #[test]
    fn diff_rx_matches_explicit_inverse() {
        let x = gaussian(30, 2, 6);
        let y = gaussian(30, 2, 7);
        let map = diff_rx(&x, &y, (5, 6), Ridge::Absolute(0.0)).unwrap();
        let d = x.sub(&y).unwrap();
        let mu = d.column_means();
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for i in 0..30 {
            let u = d[(i, 0)] - mu[0];
            let v = d[(i, 1)] - mu[1];
            a += u * u;
            b += u * v;
            c += v * v;
        }
        let (a, b, c) = (a / 30.0, b / 30.0, c / 30.0);
        let det = a * c - b * b;
        for i in 0..30 {
            let u = d[(i, 0)] - mu[0];
            let v = d[(i, 1)] - mu[1];
            let expected = (c * u * u - 2.0 * b * u * v + a * v * v) / det;
            assert!((map.values()[i] - expected).abs() < 1e-10 * expected.max(1.0));
        }
    }

    #[test]
    fn cc_recovers_exact_affine_map() {
        let x = correlated(200, 5, 8);
        let y = Matrix::from_fn(200, 5, |i, j| 2.0 * x[(i, j)] + 0.5 * j as f64);
        let p = fit_cc(&x, &y, Ridge::Absolute(0.0)).unwrap();
        let pred = p.predict(&x).unwrap();
        let rel = pred.sub(&y).unwrap().frobenius_norm() / y.frobenius_norm();
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn cc_on_identical_images_is_identity() {
        let x = correlated(300, 4, 9);
        let p = fit_cc(&x, &x, Ridge::Absolute(0.0)).unwrap();
        assert!(p.gain.max_abs_diff(&Matrix::identity(4)) < 1e-9);
    }

    #[test]
    fn cc_beats_the_mean_predictor() {
        let x = correlated(200, 4, 10);
        let y = gaussian(200, 4, 11);
        let p = fit_cc(&x, &y, Ridge::default()).unwrap();
        let pred = p.predict(&x).unwrap();
        let mean = y.column_means();
        let mean_pred = Matrix::from_fn(200, 4, |_, j| mean[j]);
        assert!(residual_sq(&pred, &y) <= residual_sq(&mean_pred, &y));
    }

    #[test]
    fn cc_gain_is_optimal_under_perturbation() {
        let x = correlated(150, 4, 12);
        let noise = gaussian(150, 4, 13);
        let y = Matrix::from_fn(150, 4, |i, j| {
            x[(i, (j + 1) % 4)] - 0.3 * x[(i, j)] + noise[(i, j)]
        });
        let p = fit_cc(&x, &y, Ridge::Absolute(0.0)).unwrap();
        let best = residual_sq(&p.predict(&x).unwrap(), &y);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let mut q = p.clone();
            for v in q.gain.as_mut_slice() {
                *v += 1e-3 * rng.sample::<f64, _>(StandardNormal);
            }
            for v in &mut q.mean_out {
                *v += 1e-3 * rng.sample::<f64, _>(StandardNormal);
            }
            assert!(residual_sq(&q.predict(&x).unwrap(), &y) >= best);
        }
    }

    #[test]
    fn ce_on_identical_images_is_identity() {
        let x = correlated(300, 4, 15);
        let p = fit_ce(&x, &x, Ridge::Absolute(0.0)).unwrap();
        assert!(p.gain.max_abs_diff(&Matrix::identity(4)) < 1e-8);
        let pred = p.predict(&x).unwrap();
        assert!(pred.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn ce_with_white_input_has_sqrt_gain() {
        // exactly whitened input: centered, then mapped by the inverse root
        let raw = gaussian(500, 3, 16);
        let s = linalg::mean_cov(&raw).unwrap();
        let w = linalg::inv_sqrt(&s.cov, 0.0).unwrap();
        let centered = Matrix::from_fn(500, 3, |i, j| raw[(i, j)] - s.mean[j]);
        let x = centered.matmul(w.as_matrix()).unwrap();
        let y = correlated(500, 3, 17);
        let p = fit_ce(&x, &y, Ridge::Absolute(0.0)).unwrap();
        let sy = linalg::mean_cov(&y).unwrap();
        let root = linalg::sqrt_psd(&sy.cov).unwrap();
        assert!(p.gain.max_abs_diff(root.as_matrix()) < 1e-6);
        let cov_pred = linalg::mean_cov(&p.predict(&x).unwrap()).unwrap().cov;
        assert!(cov_pred.as_matrix().max_abs_diff(sy.cov.as_matrix()) < 1e-6);
    }

    #[test]
    fn ce_matches_target_covariance() {
        let q = 5;
        let x = correlated(50 * q * 4, q, 18);
        let y = correlated(50 * q * 4, q, 19);
        let p = fit_ce(&x, &y, Ridge::default()).unwrap();
        let cov_pred = linalg::mean_cov(&p.predict(&x).unwrap()).unwrap().cov;
        let sy = linalg::mean_cov(&y).unwrap().cov;
        let rel = cov_pred
            .as_matrix()
            .sub(sy.as_matrix())
            .unwrap()
            .frobenius_norm()
            / sy.frobenius_norm();
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn ce_gain_ignores_pixel_order() {
        let x = correlated(60, 3, 20);
        let y = correlated(60, 3, 21);
        let order: Vec<usize> = (0..60).rev().collect();
        let a = fit_ce(&x, &y, Ridge::default()).unwrap();
        let b = fit_ce(
            &x.select_rows(&order),
            &y.select_rows(&order),
            Ridge::default(),
        )
        .unwrap();
        assert!(a.gain.max_abs_diff(&b.gain) < 1e-10);
    }

    #[test]
    fn baseline_map_shares_the_loss_definition() {
        let x = correlated(40, 3, 22);
        let y = correlated(40, 3, 23);
        let p = fit_cc(&x, &y, Ridge::default()).unwrap();
        let a = baseline_map(&p, &x, &y, (5, 8)).unwrap();
        let b = loss_map(&p.predict(&x).unwrap(), &y, (5, 8)).unwrap();
        assert_eq!(a, b);

        let identity = LinearPredictor {
            kind: PredictorKind::Cc,
            gain: Matrix::identity(3),
            mean_in: vec![0.0; 3],
            mean_out: vec![0.0; 3],
        };
        assert!(baseline_map(&identity, &x, &x, (5, 8))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn run_baseline_fuses_both_directions() {
        let x = correlated(48, 4, 24);
        let y = Matrix::from_fn(48, 4, |i, j| x[(i, j)].tanh() + 0.1 * j as f64);
        let xc = HyperCube::from_pixels(&x, 6, 8).unwrap();
        let yc = HyperCube::from_pixels(&y, 6, 8).unwrap();
        for kind in [PredictorKind::Cc, PredictorKind::Ce] {
            let run = run_baseline(kind, &xc, &yc, Ridge::default()).unwrap();
            for ((f, a), b) in run
                .fused
                .values()
                .iter()
                .zip(run.map_fwd.values())
                .zip(run.map_bwd.values())
            {
                assert!(f <= a && f <= b);
            }
            let same = run_baseline(kind, &xc, &xc, Ridge::default()).unwrap();
            assert!(same.fused.max() < 1e-6, "{kind}: {}", same.fused.max());
        }
    }

    #[test]
    fn kind_parses() {
        assert_eq!("cc".parse::<PredictorKind>().unwrap(), PredictorKind::Cc);
        assert_eq!(PredictorKind::Ce.to_string(), "ce");
        assert!("rx".parse::<PredictorKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn diff_rx_is_affine_invariant(seed in 0u64..1000) {
            let x = gaussian(40, 3, seed);
            let y = gaussian(40, 3, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            // diagonally dominant, hence invertible
            let t = Matrix::from_fn(3, 3, |i, j| {
                if i == j { 3.0 + rng.random_range(0.0..1.0) } else { rng.random_range(-1.0..1.0) }
            });
            let a = diff_rx(&x, &y, (5, 8), Ridge::Absolute(0.0)).unwrap();
            let b = diff_rx(&x.matmul(&t).unwrap(), &y.matmul(&t).unwrap(), (5, 8), Ridge::Absolute(0.0)).unwrap();
            for (u, v) in a.values().iter().zip(b.values()) {
                prop_assert!((u - v).abs() < 1e-6 * u.max(1.0));
            }
        }
    }
}
