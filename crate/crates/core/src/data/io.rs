//! Binary image/sinogram files with JSON sidecars.
//!
//! A data file is a 16-byte header (8-byte magic, `u32` format version,
//! `u32` reserved) followed by little-endian `f64` values in row-major order.
//! The sidecar `<file>.json` records the shape, pixel size or geometry, and
//! the SHA-256 of the payload.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};

pub const FORMAT_VERSION: u32 = 1;
const IMAGE_MAGIC: &[u8; 8] = b"SGCTIMG\0";
const SINO_MAGIC: &[u8; 8] = b"SGCTSNO\0";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageHeader {
    pub format_version: u32,
    pub rows: usize,
    pub cols: usize,
    pub pixel_size_mm: f64,
    /// Free-form reference to the acquisition the image came from.
    #[serde(default)]
    pub geometry_ref: Option<String>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinogramHeader {
    pub format_version: u32,
    pub n_views: usize,
    pub n_detectors: usize,
    pub geometry: FanBeamGeometry,
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(magic: &[u8; 8], values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn checksum(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

fn decode(path: &Path, magic: &[u8; 8], bytes: &[u8], expected: usize, sha: &str) -> Result<Vec<f64>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != magic {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header implies {}", payload.len(), expected * 8),
        ));
    }
    if checksum(payload) != sha {
        return Err(Error::format(path, "payload checksum mismatch"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "payload contains non-finite values"));
    }
    Ok(values)
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side)?;
    serde_json::from_str(&text).map_err(|e| Error::format(side, e.to_string()))
}

fn write_sidecar<T: Serialize>(path: &Path, header: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

pub fn save_image(path: &Path, x: &Image, geometry_ref: Option<&str>) -> Result<()> {
    let bytes = encode(IMAGE_MAGIC, x.as_slice());
    let header = ImageHeader {
        format_version: FORMAT_VERSION,
        rows: x.n(),
        cols: x.n(),
        pixel_size_mm: x.pixel_size_mm,
        geometry_ref: geometry_ref.map(str::to_owned),
        sha256: checksum(&bytes[HEADER_LEN..]),
    };
    fs::write(path, &bytes)?;
    write_sidecar(path, &header)
}

pub fn load_image(path: &Path) -> Result<(Image, ImageHeader)> {
    let header: ImageHeader = read_sidecar(path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(path, "unsupported sidecar version"));
    }
    if header.rows != header.cols {
        return Err(Error::format(path, "images must be square"));
    }
    let bytes = fs::read(path)?;
    let values = decode(path, IMAGE_MAGIC, &bytes, header.rows * header.cols, &header.sha256)?;
    let img = Image::from_vec(header.rows, header.pixel_size_mm, values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((img, header))
}

pub fn save_sinogram(path: &Path, s: &Sinogram, g: &FanBeamGeometry) -> Result<()> {
    s.check_matches(g)?;
    let bytes = encode(SINO_MAGIC, s.as_slice());
    let header = SinogramHeader {
        format_version: FORMAT_VERSION,
        n_views: s.n_views(),
        n_detectors: s.n_detectors(),
        geometry: g.clone(),
        sha256: checksum(&bytes[HEADER_LEN..]),
    };
    fs::write(path, &bytes)?;
    write_sidecar(path, &header)
}

pub fn load_sinogram(path: &Path) -> Result<(Sinogram, FanBeamGeometry)> {
    let header: SinogramHeader = read_sidecar(path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(path, "unsupported sidecar version"));
    }
    header
        .geometry
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.n_views != header.geometry.n_views() || header.n_detectors != header.geometry.n_detectors {
        return Err(Error::format(path, "sinogram shape disagrees with its geometry"));
    }
    let bytes = fs::read(path)?;
    let values = decode(path, SINO_MAGIC, &bytes, header.n_views * header.n_detectors, &header.sha256)?;
    let arr = Array2::from_shape_vec((header.n_views, header.n_detectors), values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((Sinogram::from_array(arr), header.geometry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_desk_geometry;

    fn sample_image() -> Image {
        let v: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        Image::from_vec(16, 1.8, v).unwrap()
    }

    #[test]
    fn image_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.img");
        let x = sample_image();
        save_image(&p, &x, Some("desk")).unwrap();
        let (y, h) = load_image(&p).unwrap();
        assert_eq!(x, y);
        assert_eq!(h.geometry_ref.as_deref(), Some("desk"));
        let raw = fs::read(&p).unwrap();
        assert_eq!(raw.len(), 16 + 256 * 8);
    }

    #[test]
    fn sinogram_round_trip_keeps_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.sino");
        let g = make_desk_geometry(16, 5, 151.875).unwrap();
        let mut s = Sinogram::for_geometry(&g);
        s.values.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 1e-3);
        save_sinogram(&p, &s, &g).unwrap();
        let (s2, g2) = load_sinogram(&p).unwrap();
        assert_eq!(s, s2);
        assert_eq!(g, g2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.img");
        save_image(&p, &sample_image(), None).unwrap();

        let mut raw = fs::read(&p).unwrap();
        raw[0] = b'X';
        fs::write(&p, &raw).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));

        save_image(&p, &sample_image(), None).unwrap();
        let mut raw = fs::read(&p).unwrap();
        raw.truncate(raw.len() - 8);
        fs::write(&p, &raw).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));

        save_image(&p, &sample_image(), None).unwrap();
        let mut raw = fs::read(&p).unwrap();
        let last = raw.len() - 1;
        raw[last] ^= 1;
        fs::write(&p, &raw).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));

        // Sidecar dims disagree with the payload.
        save_image(&p, &sample_image(), None).unwrap();
        let side = sidecar_path(&p);
        let text = fs::read_to_string(&side).unwrap().replace("\"rows\": 16", "\"rows\": 15").replace("\"cols\": 16", "\"cols\": 15");
        fs::write(&side, text).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
    }
}
