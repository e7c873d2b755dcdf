//! Binary PGM (P5) raster I/O with micrometre sidecar metadata.
//!
//! Masks and intensity channels travel as 8-bit P5 files. A sidecar JSON
//! next to each raster records the micrometre offset of the raster corner
//! and the resolution in µm/pixel, so pixel coordinates can be mapped back
//! into slide space.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a P5 file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("{path}: maxval {maxval} unsupported, expected 255")]
    BadMaxval { path: String, maxval: u32 },
    #[error("{path}: expected {expected} pixel bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("sidecar {path}: {reason}")]
    BadSidecar { path: String, reason: String },
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// Placement of a raster in slide space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    /// Micrometre offset of the raster's (0,0) pixel corner.
    pub origin_um: [f64; 2],
    /// Micrometres per pixel; must be positive.
    pub resolution_um_per_px: f64,
}

fn io_err(path: &Path, source: io::Error) -> PgmError {
    PgmError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads one whitespace-delimited ASCII token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<u32, PgmError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::BadHeader {
            path: path.display().to_string(),
            reason: format!("expected integer at byte {start}"),
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PgmError::BadHeader {
            path: path.display().to_string(),
            reason: format!("unparsable integer at byte {start}"),
        })
}

/// Reads a binary P5 file with maxval 255.
pub fn read_pgm(path: &Path) -> Result<GrayImage, PgmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PgmError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut pos = 2;
    let width = next_token(&bytes, &mut pos, path)? as usize;
    let height = next_token(&bytes, &mut pos, path)? as usize;
    let maxval = next_token(&bytes, &mut pos, path)?;
    if maxval != 255 {
        return Err(PgmError::BadMaxval {
            path: path.display().to_string(),
            maxval,
        });
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let expected = width * height;
    let found = bytes.len().saturating_sub(pos);
    if found < expected {
        return Err(PgmError::Truncated {
            path: path.display().to_string(),
            expected,
            found,
        });
    }
    Ok(GrayImage {
        width,
        height,
        data: bytes[pos..pos + expected].to_vec(),
    })
}

/// Writes a canonical binary P5 file: `P5\n<w> <h>\n255\n<pixels>`.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<(), PgmError> {
    let mut out = Vec::with_capacity(image.data.len() + 32);
    write!(out, "P5\n{} {}\n255\n", image.width, image.height).expect("in-memory write");
    out.extend_from_slice(&image.data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Reads the `<raster>.json` sidecar next to a PGM file.
pub fn read_sidecar(pgm_path: &Path) -> Result<RasterMeta, PgmError> {
    let path = sidecar_path(pgm_path);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let meta: RasterMeta = serde_json::from_str(&text).map_err(|e| PgmError::BadSidecar {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if !(meta.resolution_um_per_px > 0.0) || !meta.resolution_um_per_px.is_finite() {
        return Err(PgmError::BadSidecar {
            path: path.display().to_string(),
            reason: format!("resolution must be positive, got {}", meta.resolution_um_per_px),
        });
    }
    Ok(meta)
}

pub fn write_sidecar(pgm_path: &Path, meta: &RasterMeta) -> Result<(), PgmError> {
    let path = sidecar_path(pgm_path);
    let text = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let mut img = GrayImage::new(7, 3);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = (i * 13 % 256) as u8;
        }
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, img);
        write_pgm(&dir.path().join("b.pgm"), &back).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("b.pgm")).unwrap()
        );
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# produced by hand\n2 1\n255\n\x05\x07").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![5, 7]);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        fs::write(&path, b"P2\n2 1\n255\n..").unwrap();
        assert!(matches!(read_pgm(&path), Err(PgmError::BadMagic { .. })));
    }

    #[test]
    fn wrong_maxval_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pgm");
        fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(matches!(read_pgm(&path), Err(PgmError::BadMaxval { maxval: 65535, .. })));
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        fs::write(&path, b"P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(read_pgm(&path), Err(PgmError::Truncated { expected: 16, .. })));
    }

    #[test]
    fn sidecar_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let meta = RasterMeta {
            origin_um: [10.5, -3.0],
            resolution_um_per_px: 0.252,
        };
        write_sidecar(&path, &meta).unwrap();
        assert_eq!(read_sidecar(&path).unwrap(), meta);

        fs::write(
            dir.path().join("h.pgm.json"),
            r#"{"origin_um":[0,0],"resolution_um_per_px":0}"#,
        )
        .unwrap();
        assert!(matches!(
            read_sidecar(&dir.path().join("h.pgm")),
            Err(PgmError::BadSidecar { .. })
        ));
    }
}
