//! ROC analysis, display stretching and result export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi::{write_pgm, GroundTruthMask, IntensityMap};
use crate::predetect::quantile_sorted;

/// One operating point. `threshold` is the lowest score still flagged; the
/// first point of a curve uses `+∞` (nothing flagged).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub dr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Best detection rate among operating points with false-alarm rate at
    /// most `far`.
    pub fn detection_rate_at(&self, far: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.far <= far)
            .map(|p| p.dr)
            .fold(0.0, f64::max)
    }
}

pub fn roc(map: &IntensityMap, truth: &GroundTruthMask) -> Result<RocCurve> {
    if map.shape() != (truth.height(), truth.width()) {
        return Err(Error::dims(format!(
            "map is {:?}, ground truth is {}x{}",
            map.shape(),
            truth.height(),
            truth.width()
        )));
    }
    roc_from_scores(map.values(), truth.labels())
}

/// Sweeps a threshold down through every distinct score; tied scores enter
/// together, so a tie between classes contributes a diagonal segment.
pub fn roc_from_scores(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::dims(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(index) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite { index });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid(
            "ROC needs at least one anomaly and one background pixel",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        dr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("curve starts with a point");
        let p = RocPoint {
            threshold,
            far: fp as f64 / negatives as f64,
            dr: tp as f64 / positives as f64,
        };
        auc += (p.far - prev.far) * (p.dr + prev.dr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Mean score over anomaly pixels and over background pixels.
pub fn class_means(map: &IntensityMap, truth: &GroundTruthMask) -> Result<(f64, f64)> {
    if map.shape() != (truth.height(), truth.width()) {
        return Err(Error::dims("map and ground truth differ in shape"));
    }
    let (mut sa, mut sb) = (0.0, 0.0);
    for (v, &a) in map.values().iter().zip(truth.labels()) {
        if a {
            sa += v;
        } else {
            sb += v;
        }
    }
    let na = truth.anomaly_count().max(1) as f64;
    Ok((sa / na, sb / truth.background_count() as f64))
}

/// Linear interpolation between order statistics; `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, p / 100.0))
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Clips at the 2nd and 98th percentiles and scales the range to 0..=255.
pub fn stretch2(map: &IntensityMap) -> Gray8 {
    let mut sorted = map.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.02);
    let hi = quantile_sorted(&sorted, 0.98);
    let span = hi - lo;
    let pixels = map
        .values()
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect();
    Gray8 {
        height: map.height(),
        width: map.width(),
        pixels,
    }
}

pub fn write_stretched_pgm(map: &IntensityMap, path: impl AsRef<Path>) -> Result<()> {
    let img = stretch2(map);
    write_pgm(path, img.height, img.width, &img.pixels)
}

pub fn format_auc(auc: f64) -> String {
    format!("{auc:.6}")
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,far,dr\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.dr);
    }
    let _ = writeln!(out, "# auc={}", format_auc(curve.auc));
    out
}

pub fn write_roc_csv(curve: &RocCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, roc_csv(curve)).map_err(|e| Error::io(path, e))
}

/// Parses a curve CSV back into its points and the `auc` comment value.
pub fn read_roc_csv(path: impl AsRef<Path>) -> Result<(Vec<RocPoint>, Option<f64>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_roc_csv(&text)
}

pub fn parse_roc_csv(text: &str) -> Result<(Vec<RocPoint>, Option<f64>)> {
    let bad = |reason: String| Error::Format {
        what: "ROC CSV",
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("threshold,far,dr") {
        return Err(bad("missing `threshold,far,dr` header".into()));
    }
    let mut points = Vec::new();
    let mut auc = None;
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("auc=") {
                auc = Some(v.parse().map_err(|_| bad(format!("bad auc value `{v}`")))?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(format!("line {} has {} fields", n + 2, fields.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("line {}: `{s}` is not a number", n + 2)))
        };
        points.push(RocPoint {
            threshold: num(fields[0])?,
            far: num(fields[1])?,
            dr: num(fields[2])?,
        });
    }
    Ok((points, auc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_separation() {
        let c = roc_from_scores(&[2.0, 3.0, 0.0, 1.0], &[true, true, false, false]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.points.first().unwrap().far, 0.0);
        let last = c.points.last().unwrap();
        assert_eq!((last.far, last.dr), (1.0, 1.0));
    }

    #[test]
    fn constant_scores_give_the_diagonal() {
        let c = roc_from_scores(&[0.7; 5], &[true, false, false, true, false]).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.auc, 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(roc_from_scores(&[1.0, 2.0], &[true, true]).is_err());
        assert!(roc_from_scores(&[1.0, 2.0], &[false, false]).is_err());
        assert!(roc_from_scores(&[1.0], &[false, true]).is_err());
    }

    #[test]
    fn auc_equals_pairwise_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // coarse values force many ties
        let scores: Vec<f64> = (0..200)
            .map(|_| (rng.random_range(0.0..20.0f64)).floor())
            .collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.3)).collect();
        let c = roc_from_scores(&scores, &labels).unwrap();
        assert!((c.auc - mann_whitney(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn detection_rate_lookup() {
        let c = roc_from_scores(&[3.0, 2.0, 1.0, 0.0], &[true, false, true, false]).unwrap();
        assert_eq!(c.detection_rate_at(0.0), 0.5);
        assert_eq!(c.detection_rate_at(0.5), 1.0);
    }

    #[test]
    fn class_means_split_by_label() {
        let map = IntensityMap::new(1, 4, vec![4.0, 2.0, 1.0, 0.0]).unwrap();
        let truth = GroundTruthMask::new(1, 4, vec![true, true, false, false]).unwrap();
        assert_eq!(class_means(&map, &truth).unwrap(), (3.0, 0.5));
    }

    #[test]
    fn stretch_constant_map_is_black() {
        let map = IntensityMap::new(2, 3, vec![4.2; 6]).unwrap();
        assert!(stretch2(&map).pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn stretch_saturates_above_the_98th_percentile() {
        let map = IntensityMap::new(1, 101, (0..=100).map(f64::from).collect()).unwrap();
        let img = stretch2(&map);
        // percentiles of 0..=100 are the values themselves
        assert_eq!(img.pixels[2], 0);
        for v in 98..=100 {
            assert_eq!(img.pixels[v], 255);
        }
        assert_eq!(img.pixels[50], ((48.0 / 96.0) * 255.0f64).round() as u8);
        assert!(img.pixels[97] < 255);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 25.0).unwrap(), 2.5);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..50).map(|i| i % 4 == 0).collect();
        let c = roc_from_scores(&scores, &labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        write_roc_csv(&c, &path).unwrap();
        let (points, auc) = read_roc_csv(&path).unwrap();
        assert_eq!(points, c.points);
        assert_eq!(format_auc(auc.unwrap()), format_auc(c.auc));
        assert!(fs::read_to_string(&path)
            .unwrap()
            .ends_with(&format!("# auc={:.6}\n", c.auc)));
    }

    #[test]
    fn pgm_export_keeps_shape() {
        let map = IntensityMap::new(3, 5, (0..15).map(f64::from).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_stretched_pgm(&map, &path).unwrap();
        let (h, w, px) = crate::hsi::read_pgm(&path).unwrap();
        assert_eq!((h, w), (3, 5));
        assert_eq!(px, stretch2(&map).pixels);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(parse_roc_csv("a,b,c\n").is_err());
        assert!(parse_roc_csv("threshold,far,dr\n1,2\n").is_err());
        assert!(parse_roc_csv("threshold,far,dr\n1,x,0\n").is_err());
    }

    fn arb_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (4usize..60)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(-5.0f64..5.0, n),
                    prop::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("both classes", |(_, l)| {
                l.iter().any(|&a| a) && l.iter().any(|&a| !a)
            })
    }

    proptest! {
        #[test]
        fn auc_invariant_under_increasing_maps((scores, labels) in arb_scores()) {
            let base = roc_from_scores(&scores, &labels).unwrap().auc;
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let aff: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            prop_assert!((roc_from_scores(&exp, &labels).unwrap().auc - base).abs() < 1e-12);
            prop_assert!((roc_from_scores(&aff, &labels).unwrap().auc - base).abs() < 1e-12);
        }

        #[test]
        fn negated_scores_complement_auc((scores, labels) in arb_scores()) {
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            prop_assume!(sorted.len() == scores.len());
            let a = roc_from_scores(&scores, &labels).unwrap().auc;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let b = roc_from_scores(&neg, &labels).unwrap().auc;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn curve_is_monotone((scores, labels) in arb_scores()) {
            let c = roc_from_scores(&scores, &labels).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].far >= w[0].far && w[1].dr >= w[0].dr);
            }
            let last = c.points.last().unwrap();
            prop_assert_eq!((last.far, last.dr), (1.0, 1.0));
        }

        #[test]
        fn stretch_is_monotone(values in prop::collection::vec(0.0f64..100.0, 2..80)) {
            let map = IntensityMap::new(1, values.len(), values.clone()).unwrap();
            let img = stretch2(&map);
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] <= values[j] {
                        prop_assert!(img.pixels[i] <= img.pixels[j]);
                    }
                }
            }
        }
    }
}
