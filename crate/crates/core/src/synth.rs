//! Deterministic two-date scenes with known changes.
//!
//! The background is a linear mixture of smooth random endmember spectra with
//! spatially smooth abundances. The second acquisition sees it through a
//! per-band imaging condition (identity, affine, or affine after a monotone
//! tanh distortion). Anomalies are rectangles where one date shows a foreign
//! spectrum.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{GroundTruthMask, HyperCube};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Identical,
    Affine,
    Nonlinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyMode {
    /// The foreign spectrum appears in the second image.
    InsertT2,
    /// The foreign spectrum is present in the first image only.
    RemoveT2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.y + self.h).contains(&row) && (self.x..self.x + self.w).contains(&col)
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub rect: Rect,
    pub mode: AnomalyMode,
}

fn default_fill() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub n_endmembers: usize,
    pub condition: Condition,
    #[serde(default)]
    pub condition_strength: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub anomalies: Vec<Anomaly>,
    /// Fraction of an anomalous pixel covered by the foreign material; the
    /// rest keeps the local background.
    #[serde(default = "default_fill")]
    pub anomaly_fill: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.n_endmembers < 2 {
            return Err(Error::invalid("a scene needs at least 2 endmembers"));
        }
        if !(self.condition_strength >= 0.0 && self.condition_strength.is_finite()) {
            return Err(Error::invalid(
                "condition_strength must be finite and nonnegative",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and nonnegative"));
        }
        if !(self.anomaly_fill > 0.0 && self.anomaly_fill <= 1.0) {
            return Err(Error::invalid("anomaly_fill must lie in (0, 1]"));
        }
        for (i, a) in self.anomalies.iter().enumerate() {
            let r = a.rect;
            if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
                return Err(Error::invalid(format!(
                    "anomaly {i} ({r:?}) does not fit a {}x{} scene",
                    self.height, self.width
                )));
            }
            if let Some(j) = self.anomalies[..i].iter().position(|b| b.rect.overlaps(&r)) {
                return Err(Error::invalid(format!("anomalies {j} and {i} overlap")));
            }
        }
        if self.anomaly_pixels() >= self.height * self.width {
            return Err(Error::invalid("anomalies cover the whole scene"));
        }
        Ok(())
    }

    pub fn anomaly_pixels(&self) -> usize {
        self.anomalies.iter().map(|a| a.rect.area()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub x: HyperCube,
    pub y: HyperCube,
    pub truth: GroundTruthMask,
}

// Independent random streams, so that e.g. adding an anomaly leaves the
// background and noise untouched.
const STREAM_ENDMEMBERS: u64 = 0;
const STREAM_ABUNDANCE: u64 = 1;
const STREAM_CONDITION: u64 = 2;
const STREAM_NOISE_X: u64 = 3;
const STREAM_NOISE_Y: u64 = 4;
const STREAM_ANOMALY: u64 = 5;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A smooth positive spectrum: a few low-order cosines rescaled into a
/// random reflectance range.
fn smooth_spectrum(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let terms: Vec<(f64, f64)> = (0..4)
        .map(|k| {
            (
                rng.random_range(-1.0..1.0) / (k + 1) as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            let t = if bands > 1 {
                b as f64 / (bands - 1) as f64
            } else {
                0.0
            };
            terms
                .iter()
                .enumerate()
                .map(|(k, (a, phi))| a * (PI * (k + 1) as f64 * t + phi).cos())
                .sum()
        })
        .collect();
    let lo_target = rng.random_range(0.05..0.3);
    let hi_target = rng.random_range(0.5..0.9);
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![(lo_target + hi_target) / 2.0; bands];
    }
    raw.iter()
        .map(|v| lo_target + (v - lo) / (hi - lo) * (hi_target - lo_target))
        .collect()
}

/// Abundances per pixel (rows sum to one): softmax over low-frequency
/// cosine fields, one field per endmember.
fn abundances(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let (h, w, e) = (spec.height, spec.width, spec.n_endmembers);
    let waves: Vec<Vec<[f64; 4]>> = (0..e)
        .map(|_| {
            (0..4)
                .map(|_| {
                    [
                        rng.random_range(0.5..1.5),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.0..2.0 * PI),
                    ]
                })
                .collect()
        })
        .collect();
    let sharpness = 2.5;
    let mut a = Matrix::zeros(h * w, e);
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (r as f64 / h as f64, c as f64 / w as f64);
            let row = a.row_mut(r * w + c);
            for (k, field) in waves.iter().enumerate() {
                row[k] = sharpness
                    * field
                        .iter()
                        .map(|[amp, fu, fv, phi]| amp * (2.0 * PI * (fu * u + fv * v) + phi).cos())
                        .sum::<f64>();
            }
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for z in row.iter_mut() {
                *z = (*z - top).exp();
                total += *z;
            }
            row.iter_mut().for_each(|z| *z /= total);
        }
    }
    a
}

/// Per-band imaging condition fitted to the background statistics.
#[derive(Clone, Debug)]
struct ConditionMap {
    gain: Vec<f64>,
    offset: Vec<f64>,
    /// Distortion amplitude, center and width per band; zero amplitude means
    /// no distortion.
    warp: Vec<(f64, f64, f64)>,
}

impl ConditionMap {
    fn new(spec: &SceneSpec, background: &Matrix, rng: &mut ChaCha8Rng) -> Self {
        let q = spec.bands;
        let s = spec.condition_strength;
        let mean = background.column_means();
        let scale = mean.iter().sum::<f64>() / q as f64;
        let std: Vec<f64> = (0..q)
            .map(|b| {
                let var = background
                    .row_iter()
                    .map(|r| (r[b] - mean[b]).powi(2))
                    .sum::<f64>()
                    / background.rows() as f64;
                var.sqrt().max(1e-6)
            })
            .collect();
        // the draws happen for every condition so the streams stay aligned
        let gain: Vec<f64> = (0..q)
            .map(|_| 1.0 + s * rng.random_range(-1.0..=1.0))
            .collect();
        let offset: Vec<f64> = (0..q)
            .map(|_| s * scale * rng.random_range(-1.0..=1.0))
            .collect();
        match spec.condition {
            Condition::Identical => ConditionMap {
                gain: vec![1.0; q],
                offset: vec![0.0; q],
                warp: vec![(0.0, 0.0, 1.0); q],
            },
            Condition::Affine => ConditionMap {
                gain,
                offset,
                warp: vec![(0.0, 0.0, 1.0); q],
            },
            Condition::Nonlinear => ConditionMap {
                gain,
                offset,
                warp: (0..q)
                    .map(|b| (2.0 * s * std[b], mean[b], std[b] / 2.0))
                    .collect(),
            },
        }
    }

    fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        spectrum
            .iter()
            .enumerate()
            .map(|(b, &t)| {
                let (amp, center, width) = self.warp[b];
                let warped = if amp == 0.0 {
                    t
                } else {
                    t + amp * ((t - center) / width).tanh()
                };
                self.gain[b] * warped + self.offset[b]
            })
            .collect()
    }

    fn is_identity(&self) -> bool {
        self.gain.iter().all(|&g| g == 1.0)
            && self.offset.iter().all(|&o| o == 0.0)
            && self.warp.iter().all(|w| w.0 == 0.0)
    }
}

/// Noise-free background spectra, one row per pixel in row-major order.
pub fn background(spec: &SceneSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, STREAM_ENDMEMBERS);
    let endmembers: Vec<Vec<f64>> = (0..spec.n_endmembers)
        .map(|_| smooth_spectrum(spec.bands, &mut rng))
        .collect();
    let a = abundances(spec, &mut rng_for(spec.seed, STREAM_ABUNDANCE));
    let mut bg = Matrix::zeros(a.rows(), spec.bands);
    for p in 0..a.rows() {
        let weights = a.row(p).to_vec();
        let out = bg.row_mut(p);
        for (wk, em) in weights.iter().zip(&endmembers) {
            for (o, v) in out.iter_mut().zip(em) {
                *o += wk * v;
            }
        }
    }
    Ok(bg)
}

fn add_noise(m: &mut Matrix, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for v in m.as_mut_slice() {
        *v += rng.sample(normal);
    }
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let bg = background(spec)?;
    let cond = ConditionMap::new(spec, &bg, &mut rng_for(spec.seed, STREAM_CONDITION));
    let mut x = bg.clone();
    let mut y = if cond.is_identity() {
        bg.clone()
    } else {
        Matrix::from_rows(&bg.row_iter().map(|r| cond.apply(r)).collect::<Vec<_>>())?
    };

    let mut labels = vec![false; h * w];
    let mut rng = rng_for(spec.seed, STREAM_ANOMALY);
    let fill = spec.anomaly_fill;
    for a in &spec.anomalies {
        let foreign = smooth_spectrum(spec.bands, &mut rng);
        for r in a.rect.y..a.rect.y + a.rect.h {
            for c in a.rect.x..a.rect.x + a.rect.w {
                let p = r * w + c;
                labels[p] = true;
                let mixed: Vec<f64> = bg
                    .row(p)
                    .iter()
                    .zip(&foreign)
                    .map(|(b, f)| (1.0 - fill) * b + fill * f)
                    .collect();
                match a.mode {
                    AnomalyMode::InsertT2 => y.row_mut(p).copy_from_slice(&cond.apply(&mixed)),
                    AnomalyMode::RemoveT2 => x.row_mut(p).copy_from_slice(&mixed),
                }
            }
        }
    }

    add_noise(
        &mut x,
        spec.noise_sigma,
        &mut rng_for(spec.seed, STREAM_NOISE_X),
    );
    add_noise(
        &mut y,
        spec.noise_sigma,
        &mut rng_for(spec.seed, STREAM_NOISE_Y),
    );
    Ok(Scene {
        x: HyperCube::from_pixels(&x, h, w)?,
        y: HyperCube::from_pixels(&y, h, w)?,
        truth: GroundTruthMask::new(h, w, labels)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub pixels: usize,
    pub anomaly_rects: usize,
    pub anomaly_pixels: usize,
    pub background_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub spec: SceneSpec,
    pub derived: SceneCounts,
}

pub fn manifest(spec: &SceneSpec) -> Result<SceneManifest> {
    spec.validate()?;
    let pixels = spec.height * spec.width;
    let anomaly_pixels = spec.anomaly_pixels();
    Ok(SceneManifest {
        spec: spec.clone(),
        derived: SceneCounts {
            pixels,
            anomaly_rects: spec.anomalies.len(),
            anomaly_pixels,
            background_pixels: pixels - anomaly_pixels,
        },
    })
}

/// Pretty-printed JSON manifest of the spec and its derived counts.
pub fn describe(spec: &SceneSpec) -> Result<String> {
    let m = manifest(spec)?;
    Ok(serde_json::to_string_pretty(&m).expect("manifest serializes"))
}
