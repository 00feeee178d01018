//! Bidirectional auto-encoder predictors and min-fused loss maps.
//!
//! One network learns to map spectra of the first acquisition onto the
//! second, another learns the reverse. Both train on the same pre-detected
//! background pairs. Each predictor's per-pixel mean squared error against
//! the real other image is a loss map; the pixelwise minimum of the two maps
//! is the change intensity of a run, and repeated runs are averaged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{check_same_dims, HyperCube, IntensityMap, PixelMatrix};
use crate::linalg::Ridge;
use crate::matrix::Matrix;
use crate::neural::{self, MlpParams, NetworkShape, OutputActivation, SampleSet, TrainConfig};
use crate::predetect::{self, UsfaModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcdaConfig {
    pub shape: NetworkShape,
    pub train: TrainConfig,
    /// Training pairs per predictor; `None` means `min(10000, ⌈0.06·M⌉)`.
    pub sample_count: Option<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Ridge for the pre-detection eigenproblem.
    #[serde(skip, default)]
    pub ridge: Ridge,
    /// Train on per-band standardized spectra; the scaling is folded into
    /// the first and last layers afterwards.
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Train one model at a time on the calling thread.
    #[serde(default)]
    pub sequential: bool,
}

fn yes() -> bool {
    true
}

impl AcdaConfig {
    /// Default configuration with the bottleneck scaled to `bands`.
    pub fn for_bands(bands: usize) -> Result<Self> {
        Ok(AcdaConfig {
            shape: NetworkShape::scaled_acda(bands)?,
            train: TrainConfig::default(),
            sample_count: None,
            repeats: 10,
            base_seed: 0,
            ridge: Ridge::default(),
            standardize: true,
            sequential: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if self.sample_count == Some(0) {
            return Err(Error::invalid("sample_count must be at least 1"));
        }
        self.shape.validate_acda()?;
        self.train.validate()
    }

    /// Seeds for the forward and backward predictors of run `r`.
    pub fn run_seeds(&self, r: usize) -> (u64, u64) {
        let run = self.base_seed.wrapping_add(r as u64);
        (
            splitmix64(run.wrapping_mul(2)),
            splitmix64(run.wrapping_mul(2).wrapping_add(1)),
        )
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct AcdaRun {
    pub params_fwd: MlpParams,
    pub params_bwd: MlpParams,
    /// Error of predicting Y from X.
    pub loss_map_fwd: IntensityMap,
    /// Error of predicting X from Y.
    pub loss_map_bwd: IntensityMap,
    pub fused: IntensityMap,
    pub training_losses: [Vec<f64>; 2],
}

#[derive(Clone, Debug)]
pub struct AcdaOutcome {
    pub mean_map: IntensityMap,
    pub runs: Vec<AcdaRun>,
    pub usfa: UsfaModel,
    pub usfa_map: IntensityMap,
    pub samples: SampleSet,
}

/// Per-band affine scaling `v ↦ (v − mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl BandScaler {
    /// Column means (or zeros when `center` is false) and column standard
    /// deviations; a constant band keeps scale 1.
    pub fn fit(m: &Matrix, center: bool) -> Self {
        let means = m.column_means();
        let n = m.rows().max(1) as f64;
        let scale = (0..m.cols())
            .map(|b| {
                let var = m.row_iter().map(|r| (r[b] - means[b]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 * means[b].abs().max(1.0) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let mean = if center { means } else { vec![0.0; m.cols()] };
        BandScaler { mean, scale }
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |i, b| {
            (m[(i, b)] - self.mean[b]) / self.scale[b]
        })
    }
}

/// Rewrites `params` so that feeding raw inputs gives the raw-scale version
/// of what the network produced on scaled inputs.
pub fn fold_scalers(params: &mut MlpParams, input: &BandScaler, output: &BandScaler) {
    let first = params.layers.first_mut().expect("networks have layers");
    for (k, row_bias) in first.bias.iter_mut().enumerate() {
        let w = first.weights.row_mut(k);
        for ((wj, m), s) in w.iter_mut().zip(&input.mean).zip(&input.scale) {
            *wj /= s;
            *row_bias -= *wj * m;
        }
    }
    let last = params.layers.last_mut().expect("networks have layers");
    for (k, b) in last.bias.iter_mut().enumerate() {
        let s = output.scale[k];
        last.weights.row_mut(k).iter_mut().for_each(|w| *w *= s);
        *b = *b * s + output.mean[k];
    }
}

/// Trains a predictor from `input_img` to `label_img` on the pixel rows in
/// `indices`. Swapping the two images trains the opposite direction.
pub fn train_predictor(
    input_img: &PixelMatrix,
    label_img: &PixelMatrix,
    indices: &[usize],
    shape: &NetworkShape,
    train: &TrainConfig,
    standardize: bool,
) -> Result<neural::TrainOutcome> {
    if input_img.shape() != label_img.shape() {
        return Err(Error::dims(format!(
            "images are {:?} and {:?}",
            input_img.shape(),
            label_img.shape()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= input_img.rows()) {
        return Err(Error::invalid(format!("sample index {bad} out of range")));
    }
    let inputs = input_img.select_rows(indices);
    let labels = label_img.select_rows(indices);
    if !standardize {
        let samples = SampleSet::with_indices(inputs, labels, indices.to_vec())?;
        return neural::train(shape, &samples, train);
    }
    let in_scaler = BandScaler::fit(&inputs, true);
    // a ReLU output commutes with positive scaling but not with a shift
    let center_out = shape.output_activation == OutputActivation::Linear;
    let out_scaler = BandScaler::fit(&labels, center_out);
    let samples = SampleSet::with_indices(
        in_scaler.apply(&inputs),
        out_scaler.apply(&labels),
        indices.to_vec(),
    )?;
    let mut outcome = neural::train(shape, &samples, train)?;
    fold_scalers(&mut outcome.params, &in_scaler, &out_scaler);
    Ok(outcome)
}

pub fn predict_image(params: &MlpParams, img: &PixelMatrix) -> Result<PixelMatrix> {
    if params.output_dim() != img.cols() {
        return Err(Error::dims(format!(
            "predictor outputs {} bands, image has {}",
            params.output_dim(),
            img.cols()
        )));
    }
    params.predict(img)
}

/// Per-pixel `(1/Q)·Σ_b (x̂_b − y_b)²`, reshaped to `shape`.
pub fn loss_map(
    predicted: &PixelMatrix,
    expected: &PixelMatrix,
    shape: (usize, usize),
) -> Result<IntensityMap> {
    if predicted.shape() != expected.shape() {
        return Err(Error::dims(format!(
            "predicted {:?} vs expected {:?}",
            predicted.shape(),
            expected.shape()
        )));
    }
    if shape.0 * shape.1 != predicted.rows() {
        return Err(Error::dims(format!(
            "{} pixels do not fill {}x{}",
            predicted.rows(),
            shape.0,
            shape.1
        )));
    }
    let q = predicted.cols() as f64;
    let values = predicted
        .row_iter()
        .zip(expected.row_iter())
        .map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / q)
        .collect();
    IntensityMap::new(shape.0, shape.1, values)
}

pub fn fuse_min(i1: &IntensityMap, i2: &IntensityMap) -> Result<IntensityMap> {
    i1.check_same_shape(i2)?;
    let values = i1
        .values()
        .iter()
        .zip(i2.values())
        .map(|(a, b)| a.min(*b))
        .collect();
    IntensityMap::new(i1.height(), i1.width(), values)
}

/// Pixelwise mean; maps are summed in slice order.
pub fn mean_of(maps: &[&IntensityMap]) -> Result<IntensityMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("no maps to average"))?;
    let mut acc = vec![0.0; first.values().len()];
    for m in maps {
        first.check_same_shape(m)?;
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    IntensityMap::new(first.height(), first.width(), acc)
}

/// Pre-detection: USFA scores and the background training pairs drawn from
/// them.
/// `sample_count` of `None` uses the default for the image size.
pub fn pre_detect(
    x: &PixelMatrix,
    y: &PixelMatrix,
    shape: (usize, usize),
    ridge: Ridge,
    sample_count: Option<usize>,
    seed: u64,
) -> Result<(UsfaModel, IntensityMap, SampleSet)> {
    let usfa = predetect::usfa_fit(x, y, ridge)?;
    let usfa_map = predetect::usfa_intensity(&usfa, x, y, shape)?;
    let count = sample_count.unwrap_or_else(|| predetect::default_sample_count(x.rows()));
    let samples = predetect::select_samples(x, y, &usfa_map, count, seed)?;
    Ok((usfa, usfa_map, samples))
}

fn single_run(
    x: &PixelMatrix,
    y: &PixelMatrix,
    shape: (usize, usize),
    indices: &[usize],
    cfg: &AcdaConfig,
    r: usize,
) -> Result<AcdaRun> {
    let (seed_fwd, seed_bwd) = cfg.run_seeds(r);
    let train_dir = |input: &PixelMatrix, label: &PixelMatrix, seed: u64| {
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let trained = train_predictor(input, label, indices, &cfg.shape, &tc, cfg.standardize)?;
        let predicted = predict_image(&trained.params, input)?;
        let map = loss_map(&predicted, label, shape)?;
        Ok::<_, Error>((trained, map))
    };
    let (fwd, bwd) = if cfg.sequential {
        (train_dir(x, y, seed_fwd), train_dir(y, x, seed_bwd))
    } else {
        rayon::join(|| train_dir(x, y, seed_fwd), || train_dir(y, x, seed_bwd))
    };
    let (fwd, map_fwd) = fwd?;
    let (bwd, map_bwd) = bwd?;
    let fused = fuse_min(&map_fwd, &map_bwd)?;
    Ok(AcdaRun {
        params_fwd: fwd.params,
        params_bwd: bwd.params,
        loss_map_fwd: map_fwd,
        loss_map_bwd: map_bwd,
        fused,
        training_losses: [fwd.loss_history, bwd.loss_history],
    })
}

/// All repeats on a fixed training set. The mean map does not depend on
/// whether runs execute in parallel.
pub fn run_with_samples(
    x: &PixelMatrix,
    y: &PixelMatrix,
    shape: (usize, usize),
    samples: &SampleSet,
    cfg: &AcdaConfig,
) -> Result<(IntensityMap, Vec<AcdaRun>)> {
    cfg.validate()?;
    if x.cols() != cfg.shape.input_dim {
        return Err(Error::dims(format!(
            "network expects {} bands, images have {}",
            cfg.shape.input_dim,
            x.cols()
        )));
    }
    let indices = &samples.indices;
    let runs: Vec<AcdaRun> = if cfg.sequential {
        (0..cfg.repeats)
            .map(|r| single_run(x, y, shape, indices, cfg, r))
            .collect::<Result<_>>()?
    } else {
        (0..cfg.repeats)
            .into_par_iter()
            .map(|r| single_run(x, y, shape, indices, cfg, r))
            .collect::<Result<_>>()?
    };
    let fused: Vec<&IntensityMap> = runs.iter().map(|r| &r.fused).collect();
    let mean_map = mean_of(&fused)?;
    Ok((mean_map, runs))
}

/// The full pipeline: pre-detect once, then train, score and fuse
/// `cfg.repeats` independent runs and average their fused maps.
pub fn run_acda(x_cube: &HyperCube, y_cube: &HyperCube, cfg: &AcdaConfig) -> Result<AcdaOutcome> {
    check_same_dims(x_cube, y_cube)?;
    cfg.validate()?;
    let shape = (x_cube.height(), x_cube.width());
    let x = x_cube.flatten();
    let y = y_cube.flatten();
    let (usfa, usfa_map, samples) =
        pre_detect(&x, &y, shape, cfg.ridge, cfg.sample_count, cfg.base_seed)?;
    let (mean_map, runs) = run_with_samples(&x, &y, shape, &samples, cfg)?;
    Ok(AcdaOutcome {
        mean_map,
        runs,
        usfa,
        usfa_map,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(m: usize, q: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, q, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn loss_map_arithmetic() {
        let p = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let e = Matrix::from_rows(&[[1.0, 4.0]]).unwrap();
        assert_eq!(loss_map(&p, &e, (1, 1)).unwrap().values(), &[2.0]);
        assert!(loss_map(&p, &p, (1, 1))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(loss_map(&p, &e, (2, 1)).is_err());
        assert!(loss_map(&p, &Matrix::zeros(1, 3), (1, 1)).is_err());
    }

    #[test]
    fn loss_map_matches_pixel_loop() {
        let p = random_matrix(64, 4, 1);
        let e = random_matrix(64, 4, 2);
        let map = loss_map(&p, &e, (8, 8)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let i = r * 8 + c;
                let mut s = 0.0;
                for b in 0..4 {
                    s += (p[(i, b)] - e[(i, b)]).powi(2);
                }
                assert!((map.get(r, c) - s / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_min_properties() {
        let a = IntensityMap::new(1, 1, vec![0.5]).unwrap();
        let b = IntensityMap::new(1, 1, vec![0.2]).unwrap();
        assert_eq!(fuse_min(&a, &b).unwrap().values(), &[0.2]);
        assert_eq!(fuse_min(&a, &a).unwrap(), a);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let i1 =
            IntensityMap::new(5, 7, (0..35).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let i2 =
            IntensityMap::new(5, 7, (0..35).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let f = fuse_min(&i1, &i2).unwrap();
        for ((v, a), b) in f.values().iter().zip(i1.values()).zip(i2.values()) {
            assert!(v <= a && v <= b);
        }
        assert!(fuse_min(&i1, &IntensityMap::new(7, 5, vec![0.0; 35]).unwrap()).is_err());
    }

    #[test]
    fn predict_image_rows() {
        let shape = NetworkShape::acda(6, 4, 2).unwrap();
        let zero = MlpParams::zeros(&shape);
        let img = random_matrix(10, 6, 4);
        let out = predict_image(&zero, &img).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));

        let p = neural::init_params(&shape, 5).unwrap();
        let single = img.select_rows(&[3]);
        let pred = predict_image(&p, &single).unwrap();
        assert_eq!(pred.row(0), p.forward(img.row(3)).unwrap().output());

        let full = predict_image(&p, &img).unwrap();
        let order = [9, 2, 5, 0, 1, 3, 4, 6, 7, 8];
        let permuted = predict_image(&p, &img.select_rows(&order)).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(permuted.row(k), full.row(i));
        }
        assert!(predict_image(&p, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn predictor_learns_both_directions() {
        // smooth invertible per-band map on a 3-dim latent manifold
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 600;
        let q = 8;
        let mix = random_matrix(3, q, 7);
        let x = Matrix::from_fn(m, q, |_, _| 0.0);
        let mut x = x;
        for i in 0..m {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            for b in 0..q {
                x[(i, b)] = (0..3).map(|k| z[k] * mix[(k, b)]).sum::<f64>();
            }
        }
        let y = Matrix::from_fn(m, q, |i, b| 1.5 * x[(i, b)] - 0.2 + 0.3 * x[(i, b)].powi(3));
        let indices: Vec<usize> = (0..m).collect();
        let shape = NetworkShape::acda(q, 6, 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            l2_lambda: 0.0,
            seed: 2,
            ..TrainConfig::default()
        };
        for (input, label) in [(&x, &y), (&y, &x)] {
            let out = train_predictor(input, label, &indices, &shape, &cfg, false).unwrap();
            let first = out.loss_history[0];
            let last = *out.loss_history.last().unwrap();
            assert!(last < 0.02 * first, "{first} -> {last}");
        }
    }

    #[test]
    fn folded_scalers_match_explicit_scaling() {
        let x = random_matrix(30, 5, 8);
        let y = Matrix::from_fn(30, 5, |i, b| 3.0 * x[(i, b)] + 10.0);
        for act in [OutputActivation::Linear, OutputActivation::Relu] {
            let shape = NetworkShape::acda(5, 4, 2)
                .unwrap()
                .with_output_activation(act);
            let raw = neural::init_params(&shape, 9).unwrap();
            let sin = BandScaler::fit(&x, true);
            let sout = BandScaler::fit(&y, act == OutputActivation::Linear);
            let mut folded = raw.clone();
            fold_scalers(&mut folded, &sin, &sout);
            let direct = raw.predict(&sin.apply(&x)).unwrap();
            let via_fold = folded.predict(&x).unwrap();
            for i in 0..30 {
                for b in 0..5 {
                    let expected = direct[(i, b)] * sout.scale[b] + sout.mean[b];
                    assert!((via_fold[(i, b)] - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn scaler_leaves_constant_bands_alone() {
        let m = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        let s = BandScaler::fit(&m, true);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        let z = s.apply(&m);
        assert_eq!(z.row(0), &[-1.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AcdaConfig::for_bands(16).unwrap();
        assert_eq!(cfg.shape.hidden, vec![8, 5, 8]);
        assert!(cfg.validate().is_ok());
        cfg.repeats = 0;
        assert!(cfg.validate().is_err());
        cfg.repeats = 1;
        cfg.shape = NetworkShape::new(16, vec![20, 10, 20], 16).unwrap();
        assert!(cfg.validate().is_err());
        let (a, b) = AcdaConfig::for_bands(16).unwrap().run_seeds(0);
        assert_ne!(a, b);
    }

    #[test]
    fn mean_of_one_is_identity() {
        let m = IntensityMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mean_of(&[&m]).unwrap(), m);
        assert!(mean_of(&[]).is_err());
    }
}
