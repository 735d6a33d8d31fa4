//! On-disk formats.
//!
//! * raw-float: little-endian `f32` samples with a JSON sidecar at
//!   `<path>.json` describing the shape.
//! * pgm16: binary PGM (`P5`, maxval 65535, big-endian samples). Values are
//!   windowed to `[0, 1]` and quantized with `floor(t·65535 + 0.5)`, so the
//!   window midpoint maps to 32768.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DisplayWindow, ImageGrid};
use crate::projector::{FanBeamGeometry, Sinogram};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    RawFloat,
    Pgm16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinogramSidecar {
    pub num_views: usize,
    pub detector_count: usize,
    pub geometry: FanBeamGeometry,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

fn write_f32_le<T: Real>(path: &Path, values: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32_le<T: Real>(path: &Path, expected: usize) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::malformed(
            path,
            format!(
                "{} bytes, sidecar implies {} samples ({} bytes)",
                bytes.len(),
                expected,
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

/// Quantizes a value for 16-bit output.
pub fn pgm_level(v: f64, window: &DisplayWindow) -> u16 {
    let t = window.normalize(v);
    (t * 65535.0 + 0.5).floor().min(65535.0) as u16
}

pub fn write_image<T: Real>(
    image: &ImageGrid<T>,
    path: &Path,
    format: ImageFormat,
    window: Option<DisplayWindow>,
) -> Result<()> {
    match format {
        ImageFormat::RawFloat => {
            write_f32_le(path, image.values())?;
            write_json(
                &sidecar_path(path),
                &ImageSidecar {
                    width: image.width(),
                    height: image.height(),
                    pixel_size: image.pixel_size().as_f64(),
                },
            )
        }
        ImageFormat::Pgm16 => {
            let window = window
                .ok_or_else(|| Error::invalid("pgm16 output", "a display window is required"))?;
            let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
            for v in image.values() {
                out.extend_from_slice(&pgm_level(v.as_f64(), &window).to_be_bytes());
            }
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(&out).map_err(|e| Error::io(path, e))
        }
    }
}

/// Reads a raw-float image and its sidecar.
pub fn read_image<T: Real>(path: &Path) -> Result<ImageGrid<T>> {
    let meta: ImageSidecar = read_json(&sidecar_path(path))?;
    let values = read_f32_le(path, meta.width * meta.height)?;
    ImageGrid::new(meta.width, meta.height, T::lit(meta.pixel_size), values)
        .map_err(|e| Error::malformed(path, e.to_string()))
}

/// Reads a 16-bit PGM, mapping levels back linearly onto `window`.
pub fn read_pgm16<T: Real>(path: &Path, window: DisplayWindow, pixel_size: f64) -> Result<ImageGrid<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::malformed(path, format!("magic {:?}, expected P5", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::malformed(path, format!("bad header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(Error::malformed(path, format!("maxval {maxval}, expected 65535")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 2 {
        return Err(Error::malformed(
            path,
            format!("{} sample bytes for {w}x{h} image", body.len()),
        ));
    }
    let span = window.high - window.low;
    let values = body
        .chunks_exact(2)
        .map(|c| T::lit(window.low + span * u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0))
        .collect();
    ImageGrid::new(w, h, T::lit(pixel_size), values).map_err(|e| Error::malformed(path, e.to_string()))
}

pub fn write_sinogram<T: Real>(sino: &Sinogram<T>, path: &Path) -> Result<()> {
    write_f32_le(path, sino.values())?;
    write_json(
        &sidecar_path(path),
        &SinogramSidecar {
            num_views: sino.num_views(),
            detector_count: sino.detector_count(),
            geometry: sino.geometry().clone(),
        },
    )
}

pub fn read_sinogram<T: Real>(path: &Path) -> Result<Sinogram<T>> {
    let meta: SinogramSidecar = read_json(&sidecar_path(path))?;
    if meta.num_views != meta.geometry.num_views || meta.detector_count != meta.geometry.detector_count {
        return Err(Error::malformed(path, "sidecar shape disagrees with its geometry"));
    }
    let values = read_f32_le(path, meta.num_views * meta.detector_count)?;
    Sinogram::new(values, meta.geometry).map_err(|e| Error::malformed(path, e.to_string()))
}
