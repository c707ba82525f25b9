//! CSIR image container: a JSON header beside a raw little-endian f64 payload.
//!
//! Sample `(channel, x, y)` is stored as re/im at float offset
//! `((channel * height + y) * width + x) * 2`, so channels (echoes) vary slowest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageGrid;
use crate::{CVec, Complex64};

pub const FORMAT: &str = "CSIR";
pub const LAYOUT: &str = "row-major, per-voxel interleaved re/im, echo-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsirHeader {
    #[serde(default = "default_format")]
    pub format: String,
    pub width: usize,
    pub height: usize,
    pub n_e: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_s: Option<usize>,
    pub echo_times_ms: Vec<f64>,
    pub dtype: String,
    pub layout: String,
    /// What the channels hold: "signal", "xi", "concentration", "pdff", ...
    #[serde(default = "default_quantity")]
    pub quantity: String,
    /// Complex values per voxel; equals `n_e` for signals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// Payload file name relative to the header; defaults to the header stem with `.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
}

fn default_format() -> String {
    FORMAT.into()
}

fn default_quantity() -> String {
    "signal".into()
}

impl CsirHeader {
    pub fn new(width: usize, height: usize, echo_times_ms: Vec<f64>, quantity: &str, channels: usize) -> Self {
        CsirHeader {
            format: FORMAT.into(),
            width,
            height,
            n_e: echo_times_ms.len(),
            n_s: None,
            echo_times_ms,
            dtype: "f64".into(),
            layout: LAYOUT.into(),
            quantity: quantity.into(),
            channels: Some(channels),
            payload: None,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.unwrap_or(self.n_e)
    }

    pub fn expected_bytes(&self) -> usize {
        self.width * self.height * self.n_channels() * 2 * 8
    }
}

fn payload_path(header_path: &Path, header: &CsirHeader) -> PathBuf {
    match &header.payload {
        Some(name) => header_path.with_file_name(name),
        None => header_path.with_extension("bin"),
    }
}

/// Writes `<path>` (header) and the payload next to it; `voxels` is row-major.
pub fn write_container(path: &Path, header: &CsirHeader, voxels: &[CVec]) -> Result<()> {
    let nc = header.n_channels();
    let n = header.width * header.height;
    if voxels.len() != n || voxels.iter().any(|v| v.len() != nc) {
        return Err(Error::Dimension(format!("container expects {n} voxels of {nc} channels")));
    }
    let mut header = header.clone();
    let bin = payload_path(path, &header);
    header.payload = Some(bin.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string());
    let mut bytes = Vec::with_capacity(header.expected_bytes());
    for ch in 0..nc {
        for v in voxels {
            bytes.extend_from_slice(&v[ch].re.to_le_bytes());
            bytes.extend_from_slice(&v[ch].im.to_le_bytes());
        }
    }
    fs::write(&bin, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(CsirHeader, Vec<CVec>)> {
    let header: CsirHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("unknown container format {:?}", header.format)));
    }
    if header.dtype != "f64" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.quantity == "signal" && header.echo_times_ms.len() != header.n_e {
        return Err(Error::Format("echo_times_ms length differs from n_e".into()));
    }
    let bytes = fs::read(payload_path(path, &header))?;
    if bytes.len() != header.expected_bytes() {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {}",
            bytes.len(),
            header.expected_bytes()
        )));
    }
    let n = header.width * header.height;
    let nc = header.n_channels();
    let mut voxels = vec![CVec::zeros(nc); n];
    let value = |k: usize| f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().expect("8-byte chunk"));
    for ch in 0..nc {
        for (v, vox) in voxels.iter_mut().enumerate() {
            let k = 2 * (ch * n + v);
            vox[ch] = Complex64::new(value(k), value(k + 1));
        }
    }
    Ok((header, voxels))
}

pub fn write_grid(path: &Path, grid: &ImageGrid, echo_times_ms: &[f64]) -> Result<()> {
    let header = CsirHeader::new(grid.width, grid.height, echo_times_ms.to_vec(), "signal", grid.n_echoes());
    write_container(path, &header, &grid.signal)
}

/// Reads a signal container; the mask keeps voxels with norm above `mask_threshold`.
pub fn read_grid(path: &Path, mask_threshold: f64) -> Result<(CsirHeader, ImageGrid)> {
    let (header, voxels) = read_container(path)?;
    let grid = ImageGrid::with_threshold_mask(header.width, header.height, voxels, mask_threshold)?;
    Ok((header, grid))
}

pub fn scalar_channels(values: &[Complex64]) -> Vec<CVec> {
    values.iter().map(|z| CVec::from_element(1, *z)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        let voxels: Vec<CVec> = (0..6)
            .map(|v| CVec::from_vec(vec![Complex64::new(v as f64, 0.5), Complex64::new(10.0 + v as f64, -0.5)]))
            .collect();
        let header = CsirHeader::new(3, 2, vec![1.0, 2.0], "signal", 2);
        write_container(&path, &header, &voxels).unwrap();
        let bytes = std::fs::read(dir.path().join("tiny.bin")).unwrap();
        assert_eq!(bytes.len(), header.expected_bytes());
        let at = |k: usize| f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
        // channel 1 of voxel (x=1, y=1) sits after the full channel-0 plane
        assert_eq!(at(2 * (6 + 4)), 14.0);
        let (h2, back) = read_container(&path).unwrap();
        assert_eq!(back, voxels);
        assert_eq!(h2.payload.as_deref(), Some("tiny.bin"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let header = CsirHeader::new(2, 1, vec![1.0], "signal", 1);
        write_container(&path, &header, &[CVec::zeros(1), CVec::zeros(1)]).unwrap();
        std::fs::write(dir.path().join("a.bin"), [0u8; 24]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format(_))));
    }
}
