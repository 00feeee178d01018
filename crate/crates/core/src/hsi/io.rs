//! On-disk container: a JSON header next to a little-endian `f32`
//! band-sequential raw file, plus binary PGM (P5) masks and previews.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GroundTruthMask, HyperCube, IntensityMap};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub interleave: String,
    /// Raw payload file name, relative to the header's directory.
    pub raw: String,
    /// Free-form provenance attached to exported results.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

fn raw_path_for(header_path: &Path) -> (PathBuf, String) {
    let stem = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cube".to_owned());
    let name = format!("{stem}.raw");
    (header_path.with_file_name(&name), name)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(
    path: &Path,
    what: &'static str,
) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what,
        reason: format!("{}: {e}", path.display()),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("header serialization");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_cube_inner(cube: &HyperCube, path: &Path, notes: BTreeMap<String, String>) -> Result<()> {
    let (raw_path, raw_name) = raw_path_for(path);
    let mut bytes = Vec::with_capacity(cube.data().len() * 4);
    for v in cube.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    let header = CubeHeader {
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype: "f32".into(),
        interleave: "bsq".into(),
        raw: raw_name,
        notes,
    };
    write_json(path, &header)
}

/// Writes `path` (the JSON header) and a sibling `<stem>.raw` payload.
pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    write_cube_inner(cube, path.as_ref(), BTreeMap::new())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let path = path.as_ref();
    let header: CubeHeader = read_json(path, "cube header")?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            what: "cube header",
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    if header.interleave != "bsq" {
        return Err(Error::Format {
            what: "cube header",
            reason: format!("unsupported interleave {:?}", header.interleave),
        });
    }
    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&header.raw);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.height * header.width * header.bands;
    if bytes.len() != expected * 4 {
        return Err(Error::dims(format!(
            "header declares {}x{}x{} ({expected} values) but {} holds {} bytes",
            header.height,
            header.width,
            header.bands,
            raw_path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    HyperCube::new(header.height, header.width, header.bands, data)
}

fn map_to_cube(map: &IntensityMap) -> Result<HyperCube> {
    let data = map.values().iter().map(|&v| v as f32).collect();
    HyperCube::new(map.height(), map.width(), 1, data)
}

/// Exports a map as a single-band cube. Values are stored as `f32`.
pub fn write_map(map: &IntensityMap, path: impl AsRef<Path>) -> Result<()> {
    write_map_with_notes(map, path, BTreeMap::new())
}

pub fn write_map_with_notes(
    map: &IntensityMap,
    path: impl AsRef<Path>,
    notes: BTreeMap<String, String>,
) -> Result<()> {
    write_cube_inner(&map_to_cube(map)?, path.as_ref(), notes)
}

pub fn read_map(path: impl AsRef<Path>) -> Result<IntensityMap> {
    let cube = read_cube(path)?;
    if cube.bands() != 1 {
        return Err(Error::dims(format!(
            "intensity maps have one band, file has {}",
            cube.bands()
        )));
    }
    let values = cube.data().iter().map(|&v| f64::from(v)).collect();
    IntensityMap::new(cube.height(), cube.width(), values)
}

fn pgm_error(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "PGM",
        reason: reason.into(),
    }
}

/// Parses a binary 8-bit PGM, returning `(height, width, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_error("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P5" {
        return Err(pgm_error("not a binary PGM (P5) file"));
    }
    let num = |f: &[u8], name: &str| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_error(format!("bad {name}")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(pgm_error("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(pgm_error(format!("maxval {maxval} is not 8-bit")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(pgm_error("missing payload"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let n = width * height;
    if payload.len() < n {
        return Err(pgm_error(format!(
            "payload holds {} of {n} bytes",
            payload.len()
        )));
    }
    Ok((height, width, payload[..n].to_vec()))
}

pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != height * width {
        return Err(Error::dims(format!(
            "{height}x{width} image with {} pixels",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a P5 mask: zero is background, anything else is an anomaly.
pub fn read_mask(
    path: impl AsRef<Path>,
    expected: Option<(usize, usize)>,
) -> Result<GroundTruthMask> {
    let (height, width, pixels) = read_pgm(path)?;
    if let Some((h, w)) = expected {
        if (h, w) != (height, width) {
            return Err(Error::dims(format!(
                "mask is {height}x{width}, expected {h}x{w}"
            )));
        }
    }
    GroundTruthMask::new(height, width, pixels.iter().map(|&p| p != 0).collect())
}

pub fn write_mask(mask: &GroundTruthMask, path: impl AsRef<Path>) -> Result<()> {
    let pixels: Vec<u8> = mask
        .labels()
        .iter()
        .map(|&a| if a { 255 } else { 0 })
        .collect();
    write_pgm(path, mask.height(), mask.width(), &pixels)
}
