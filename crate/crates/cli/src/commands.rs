use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde_json::{json, Map, Value};

use acdkit::acda::{self, AcdaConfig};
use acdkit::baselines::{self, PredictorKind};
use acdkit::eval;
use acdkit::hsi::{self, CubeHeader, GroundTruthMask, HyperCube, IntensityMap};
use acdkit::synth::{self, SceneSpec};

use crate::config::{apply_overrides, from_object, parse_object, DetectConfig};
use crate::manifest::{digests, RunManifest};
use crate::{CliError, Method};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(acdkit::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// The header plus the raw payload it points at.
fn cube_files(header: &Path) -> Vec<PathBuf> {
    let raw = fs::read_to_string(header)
        .ok()
        .and_then(|t| serde_json::from_str::<CubeHeader>(&t).ok())
        .map(|h| header.with_file_name(h.raw));
    std::iter::once(header.to_path_buf()).chain(raw).collect()
}

fn write_map(
    map: &IntensityMap,
    path: &Path,
    notes: &[(&str, String)],
) -> Result<Vec<PathBuf>, CliError> {
    let notes: BTreeMap<String, String> = notes
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    hsi::write_map_with_notes(map, path, notes)?;
    Ok(cube_files(path))
}

fn read_pair(x: &Path, y: &Path) -> Result<(HyperCube, HyperCube), CliError> {
    let xc = hsi::read_cube(x)?;
    let yc = hsi::read_cube(y)?;
    if xc.dims() != yc.dims() {
        return Err(acdkit::Error::Dimension(format!(
            "{} is {:?} but {} is {:?}",
            x.display(),
            xc.dims(),
            y.display(),
            yc.dims()
        ))
        .into());
    }
    Ok((xc, yc))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    out: &Path,
    command: &str,
    config: Value,
    inputs: &[PathBuf],
    mut outputs: Vec<PathBuf>,
    seeds: Vec<u64>,
    sequential: bool,
    started: Instant,
) -> Result<(), CliError> {
    outputs.sort();
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        inputs: digests(inputs)?,
        outputs: digests(&outputs)?,
        seeds,
        sequential,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let path = out.join("manifest.json");
    manifest.write(&path)?;
    println!("manifest={}", path.display());
    println!("seconds={:.3}", manifest.wall_clock_seconds);
    Ok(())
}

pub fn synth(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let text = read_text(spec_path)?;
    let spec: SceneSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let scene = synth::generate(&spec)?;
    let description = synth::manifest(&spec)?;

    ensure_dir(out)?;
    let (x, y, mask) = (out.join("x.json"), out.join("y.json"), out.join("mask.pgm"));
    hsi::write_cube(&scene.x, &x)?;
    hsi::write_cube(&scene.y, &y)?;
    hsi::write_mask(&scene.truth, &mask)?;
    let mut outputs = cube_files(&x);
    outputs.extend(cube_files(&y));
    outputs.push(mask.clone());

    println!("x={}", x.display());
    println!("y={}", y.display());
    println!("mask={}", mask.display());
    println!("anomaly_pixels={}", scene.truth.anomaly_count());
    let config = serde_json::to_value(&description).expect("scene manifest serializes");
    finish(
        out,
        "synth",
        config,
        &[spec_path.to_path_buf()],
        outputs,
        vec![spec.seed],
        true,
        started,
    )
}

fn load_detect_config(
    path: Option<&Path>,
    sets: &[String],
) -> Result<(Map<String, Value>, Vec<PathBuf>), CliError> {
    let mut inputs = Vec::new();
    let mut obj = match path {
        Some(p) => {
            inputs.push(p.to_path_buf());
            parse_object(&read_text(p)?, &p.display().to_string())?
        }
        None => Map::new(),
    };
    apply_overrides(&mut obj, sets)?;
    Ok((obj, inputs))
}

fn loss_csv(runs: &[acda::AcdaRun]) -> String {
    let mut s = String::from("run,direction,epoch,loss\n");
    for (r, run) in runs.iter().enumerate() {
        for (dir, hist) in ["fwd", "bwd"].iter().zip(&run.training_losses) {
            for (e, l) in hist.iter().enumerate() {
                let _ = writeln!(s, "{r},{dir},{e},{l}");
            }
        }
    }
    s
}

fn samples_csv(indices: &[usize]) -> String {
    let mut s = String::from("index\n");
    for i in indices {
        let _ = writeln!(s, "{i}");
    }
    s
}

#[allow(clippy::too_many_arguments)]
pub fn detect(
    method: Method,
    x: &Path,
    y: &Path,
    config: Option<&Path>,
    sets: &[String],
    out: &Path,
    directional: bool,
    sequential: bool,
) -> Result<(), CliError> {
    let started = Instant::now();
    let (obj, mut inputs) = load_detect_config(config, sets)?;
    let dc: DetectConfig = from_object(obj, "detector config")?;
    let (xc, yc) = read_pair(x, y)?;
    inputs.extend(cube_files(x));
    inputs.extend(cube_files(y));
    ensure_dir(out)?;
    let map_path = out.join("map.json");
    let mut outputs = Vec::new();
    let mut seeds = Vec::new();
    let mut snapshot = json!({ "method": method.name(), "detector": dc });

    let map = match method {
        Method::Acda => {
            let cfg = dc.acda(xc.bands(), sequential)?;
            info!(
                "acda {:?}, {} repeats, {} epochs",
                cfg.shape.hidden, cfg.repeats, cfg.train.epochs
            );
            let outcome = acda::run_acda(&xc, &yc, &cfg)?;
            seeds = (0..cfg.repeats)
                .map(|r| cfg.base_seed.wrapping_add(r as u64))
                .collect();
            snapshot["shape"] = serde_json::to_value(&cfg.shape).expect("shape serializes");
            snapshot["sample_count"] = json!(outcome.samples.len());
            snapshot["usfa_fallback"] = json!(outcome.usfa.fallback);

            let losses = out.join("losses.csv");
            write_text(&losses, &loss_csv(&outcome.runs))?;
            let samples = out.join("samples.csv");
            write_text(&samples, &samples_csv(&outcome.samples.indices))?;
            outputs.extend([losses, samples]);
            if directional {
                let p = out.join("usfa.json");
                outputs.extend(write_map(
                    &outcome.usfa_map,
                    &p,
                    &[("method", "usfa".into())],
                )?);
                for (r, run) in outcome.runs.iter().enumerate() {
                    for (name, m) in [
                        ("fwd", &run.loss_map_fwd),
                        ("bwd", &run.loss_map_bwd),
                        ("fused", &run.fused),
                    ] {
                        let p = out.join(format!("run{r}_{name}.json"));
                        let notes = [("method", "acda".into()), ("scoring", "mse".into())];
                        outputs.extend(write_map(m, &p, &notes)?);
                    }
                }
            }
            outputs.extend(write_map(
                &outcome.mean_map,
                &map_path,
                &[
                    ("method", "acda".into()),
                    ("scoring", "mse".into()),
                    ("repeats", cfg.repeats.to_string()),
                ],
            )?);
            outcome.mean_map
        }
        Method::Diffrx => {
            let m = baselines::run_diff_rx(&xc, &yc, dc.ridge())?;
            let notes = [
                ("method", "diffrx".into()),
                ("scoring", "mahalanobis".into()),
            ];
            outputs.extend(write_map(&m, &map_path, &notes)?);
            m
        }
        Method::Cc | Method::Ce => {
            let kind = if method == Method::Cc {
                PredictorKind::Cc
            } else {
                PredictorKind::Ce
            };
            let run = baselines::run_baseline(kind, &xc, &yc, dc.ridge())?;
            let notes = [("method", kind.to_string()), ("scoring", "mse".into())];
            if directional {
                outputs.extend(write_map(&run.map_fwd, &out.join("fwd.json"), &notes)?);
                outputs.extend(write_map(&run.map_bwd, &out.join("bwd.json"), &notes)?);
            }
            outputs.extend(write_map(&run.fused, &map_path, &notes)?);
            run.fused
        }
    };
    snapshot["sequential"] = json!(sequential);

    println!("method={}", method.name());
    println!("map={}", map_path.display());
    println!("min={}", map.min());
    println!("max={}", map.max());
    finish(
        out, "detect", snapshot, &inputs, outputs, seeds, sequential, started,
    )
}

pub fn eval(map_path: &Path, mask_path: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let map = hsi::read_map(map_path)?;
    let truth = hsi::read_mask(mask_path, Some(map.shape()))?;
    let curve = eval::roc(&map, &truth)?;
    ensure_dir(out)?;
    let csv = out.join("roc.csv");
    eval::write_roc_csv(&curve, &csv)?;
    let pgm = out.join("map.pgm");
    eval::write_stretched_pgm(&map, &pgm)?;

    println!("auc={}", eval::format_auc(curve.auc));
    println!("dr_at_far_0.1={}", curve.detection_rate_at(0.1));
    println!("roc={}", csv.display());
    let mut inputs = cube_files(map_path);
    inputs.push(mask_path.to_path_buf());
    let config = json!({ "auc": curve.auc, "points": curve.points.len() });
    finish(
        out,
        "eval",
        config,
        &inputs,
        vec![csv, pgm],
        vec![],
        true,
        started,
    )
}

fn take_widths(obj: &mut Map<String, Value>, key: &str) -> Result<Vec<usize>, CliError> {
    let v = obj
        .remove(key)
        .ok_or_else(|| CliError::Config(format!("grid needs a `{key}` list")))?;
    let mut widths: Vec<usize> =
        serde_json::from_value(v).map_err(|e| CliError::Config(format!("grid `{key}`: {e}")))?;
    if widths.is_empty() || widths.contains(&0) {
        return Err(CliError::Config(format!(
            "grid `{key}` needs positive widths"
        )));
    }
    widths.sort_unstable_by(|a, b| b.cmp(a));
    widths.dedup();
    Ok(widths)
}

/// One table cell: `None` for an invalid pair (h2 ≥ h1), `Some(NaN)` for a
/// failed run.
fn sweep_cell(
    xm: &acdkit::PixelMatrix,
    ym: &acdkit::PixelMatrix,
    shape: (usize, usize),
    truth: &GroundTruthMask,
    samples: &acdkit::neural::SampleSet,
    cfg: Result<AcdaConfig, CliError>,
) -> f64 {
    let result = cfg.and_then(|cfg| {
        let (mean, _) = acda::run_with_samples(xm, ym, shape, samples, &cfg)?;
        Ok(eval::roc(&mean, truth)?.auc)
    });
    match result {
        Ok(auc) => auc,
        Err(e) => {
            warn!("cell failed: {e}");
            f64::NAN
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    x: &Path,
    y: &Path,
    mask: &Path,
    grid: &Path,
    sets: &[String],
    out: &Path,
    sequential: bool,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut obj = parse_object(&read_text(grid)?, &grid.display().to_string())?;
    apply_overrides(&mut obj, sets)?;
    let h1s = take_widths(&mut obj, "h1")?;
    let h2s = take_widths(&mut obj, "h2")?;
    let base: DetectConfig = from_object(obj, "grid settings")?;
    let (xc, yc) = read_pair(x, y)?;
    let truth = hsi::read_mask(mask, Some((xc.height(), xc.width())))?;
    let shape = (xc.height(), xc.width());
    let (xm, ym) = (xc.flatten(), yc.flatten());

    let cell_cfg = |h1: usize, h2: usize| {
        DetectConfig {
            h1: Some(h1),
            h2: Some(h2),
            ..base.clone()
        }
        .acda(xc.bands(), sequential)
    };
    // training pairs do not depend on the network shape: select them once
    let (_, _, samples) =
        acda::pre_detect(&xm, &ym, shape, base.ridge(), base.sample_count, base.seed)?;

    let mut table = String::from("h2\\h1");
    for h1 in &h1s {
        let _ = write!(table, ",{h1}");
    }
    table.push('\n');
    let mut best: Option<(usize, usize, f64)> = None;
    let mut cells = 0;
    for &h2 in &h2s {
        let _ = write!(table, "{h2}");
        for &h1 in &h1s {
            if h2 >= h1 {
                table.push_str(",-");
                continue;
            }
            cells += 1;
            let auc = sweep_cell(&xm, &ym, shape, &truth, &samples, cell_cfg(h1, h2));
            info!("h1={h1} h2={h2} auc={auc}");
            if auc.is_nan() {
                table.push_str(",nan");
            } else {
                let _ = write!(table, ",{}", eval::format_auc(auc));
                if best.is_none_or(|(_, _, b)| auc > b) {
                    best = Some((h1, h2, auc));
                }
            }
        }
        table.push('\n');
    }
    ensure_dir(out)?;
    let csv = out.join("sweep.csv");
    write_text(&csv, &table)?;

    println!("table={}", csv.display());
    println!("cells={cells}");
    if let Some((h1, h2, auc)) = best {
        println!("best_h1={h1}");
        println!("best_h2={h2}");
        println!("best_auc={}", eval::format_auc(auc));
    }
    let mut inputs = vec![grid.to_path_buf()];
    inputs.extend(cube_files(x));
    inputs.extend(cube_files(y));
    inputs.push(mask.to_path_buf());
    let config = json!({ "h1": h1s, "h2": h2s, "detector": base, "sample_count": samples.len() });
    let seeds = (0..base.repeats)
        .map(|r| base.seed.wrapping_add(r as u64))
        .collect();
    finish(
        out,
        "sweep",
        config,
        &inputs,
        vec![csv],
        seeds,
        sequential,
        started,
    )
}
