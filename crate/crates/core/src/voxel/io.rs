//! Volume file I/O: the sidecar format (`<name>.json` + `<name>.raw`) and a
//! strict subset of NRRD.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::util::write_atomic;
use crate::error::{Error, Result};

use super::VoxelVolume;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarHeader {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    order: String,
}

fn raw_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("raw")
}

/// Loads a volume from a `.json` sidecar header (with its `.raw` payload) or
/// from a `.nrrd` file. Payload values are binarized by `> 0`.
pub fn load_volume(path: &Path) -> Result<VoxelVolume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => load_sidecar(path),
        Some("nrrd") => load_nrrd(path),
        _ => Err(Error::Unsupported {
            path: path.into(),
            reason: "expected a .json sidecar or .nrrd file".into(),
        }),
    }
}

/// Writes the sidecar pair for `path` (which must end in `.json`).
pub fn save_volume(v: &VoxelVolume, path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) != Some("json") {
        return Err(Error::Unsupported {
            path: path.into(),
            reason: "sidecar volumes are saved to a .json path".into(),
        });
    }
    let header = SidecarHeader {
        shape: v.shape(),
        spacing_mm: v.spacing(),
        origin_mm: v.origin(),
        dtype: "u8".into(),
        order: "x-fastest".into(),
    };
    let json = serde_json::to_vec_pretty(&header)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    write_atomic(path, &json)?;
    write_atomic(&raw_path(path), v.data())
}

fn load_sidecar(path: &Path) -> Result<VoxelVolume> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: SidecarHeader =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
    if header.dtype != "u8" {
        return Err(Error::Unsupported {
            path: path.into(),
            reason: format!("sidecar dtype {:?}", header.dtype),
        });
    }
    if header.order != "x-fastest" {
        return Err(Error::Unsupported {
            path: path.into(),
            reason: format!("sidecar order {:?}", header.order),
        });
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::malformed(path, "non-positive spacing"));
    }
    let raw = raw_path(path);
    let data = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = header.shape.iter().product::<usize>();
    if data.len() != expected {
        return Err(Error::ShapeDataMismatch {
            shape: header.shape,
            expected,
            actual: data.len(),
        });
    }
    let data = data.into_iter().map(|v| u8::from(v > 0)).collect();
    VoxelVolume::new(header.shape, header.spacing_mm, header.origin_mm, data)
}

// --- NRRD subset -------------------------------------------------------------
//
// Supported: dimension 3, type uint8/short, encoding raw/gzip, diagonal
// space directions. Everything else is an unsupported-feature error.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NrrdType {
    Uint8,
    Short,
}

pub(crate) fn load_nrrd(path: &Path) -> Result<VoxelVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| Error::malformed(path, "missing blank line after header"))?;
    let header_text = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::malformed(path, "header is not utf-8"))?;
    let payload = &bytes[header_end..];

    let mut lines = header_text.lines();
    let magic = lines.next().unwrap_or("");
    if !magic.starts_with("NRRD000") {
        return Err(Error::malformed(path, "missing NRRD magic"));
    }

    let mut dimension: Option<usize> = None;
    let mut sizes: Option<[usize; 3]> = None;
    let mut ty: Option<NrrdType> = None;
    let mut encoding: Option<String> = None;
    let mut spacing: Option<[f64; 3]> = None;
    let mut origin = [0.0f64; 3];
    let mut big_endian = false;

    for line in lines {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::malformed(path, format!("bad header line {line:?}")));
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "dimension" => {
                dimension = Some(
                    value
                        .parse()
                        .map_err(|_| Error::malformed(path, "bad dimension"))?,
                )
            }
            "sizes" => {
                let v: Vec<usize> = value
                    .split_whitespace()
                    .map(|s| s.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::malformed(path, "bad sizes"))?;
                if v.len() != 3 {
                    return Err(Error::Unsupported {
                        path: path.into(),
                        reason: format!("{} axes, only 3 supported", v.len()),
                    });
                }
                sizes = Some([v[0], v[1], v[2]]);
            }
            "type" => {
                ty = Some(match value {
                    "uint8" | "uchar" | "unsigned char" | "uint8_t" => NrrdType::Uint8,
                    "short" | "int16" | "int16_t" | "signed short" => NrrdType::Short,
                    other => {
                        return Err(Error::Unsupported {
                            path: path.into(),
                            reason: format!("nrrd type {other:?}"),
                        })
                    }
                })
            }
            "encoding" => encoding = Some(value.to_string()),
            "endian" => big_endian = value == "big",
            "space directions" => {
                spacing = Some(parse_diagonal_directions(path, value)?);
            }
            "space origin" => {
                origin = parse_vector3(path, value)?;
            }
            "data file" | "datafile" => {
                return Err(Error::Unsupported {
                    path: path.into(),
                    reason: "detached nrrd data files".into(),
                })
            }
            // tolerated metadata that does not affect the payload layout
            "space" | "kinds" | "space units" | "content" => {}
            other => {
                return Err(Error::Unsupported {
                    path: path.into(),
                    reason: format!("nrrd field {other:?}"),
                })
            }
        }
    }

    if dimension != Some(3) {
        return Err(Error::Unsupported {
            path: path.into(),
            reason: format!("dimension {dimension:?}, only 3 supported"),
        });
    }
    let sizes = sizes.ok_or_else(|| Error::malformed(path, "missing sizes"))?;
    let ty = ty.ok_or_else(|| Error::malformed(path, "missing type"))?;
    let encoding = encoding.ok_or_else(|| Error::malformed(path, "missing encoding"))?;
    let spacing = spacing.unwrap_or([1.0, 1.0, 1.0]);
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::malformed(path, "non-positive spacing"));
    }

    let decoded: Vec<u8> = match encoding.as_str() {
        "raw" => payload.to_vec(),
        "gzip" | "gz" => {
            let mut out = Vec::new();
            flate2::read::GzDecoder::new(payload)
                .read_to_end(&mut out)
                .map_err(|e| Error::malformed(path, format!("gzip payload: {e}")))?;
            out
        }
        other => {
            return Err(Error::Unsupported {
                path: path.into(),
                reason: format!("nrrd encoding {other:?}"),
            })
        }
    };

    let voxels = sizes.iter().product::<usize>();
    let data: Vec<u8> = match ty {
        NrrdType::Uint8 => {
            if decoded.len() != voxels {
                return Err(Error::ShapeDataMismatch {
                    shape: sizes,
                    expected: voxels,
                    actual: decoded.len(),
                });
            }
            decoded.into_iter().map(|v| u8::from(v > 0)).collect()
        }
        NrrdType::Short => {
            if decoded.len() != voxels * 2 {
                return Err(Error::ShapeDataMismatch {
                    shape: sizes,
                    expected: voxels * 2,
                    actual: decoded.len(),
                });
            }
            decoded
                .chunks_exact(2)
                .map(|c| {
                    let raw = [c[0], c[1]];
                    let v = if big_endian {
                        i16::from_be_bytes(raw)
                    } else {
                        i16::from_le_bytes(raw)
                    };
                    u8::from(v > 0)
                })
                .collect()
        }
    };

    VoxelVolume::new(sizes, spacing, origin, data)
}

/// Header ends at the first blank line (`\n\n` or `\r\n\r\n`); the payload
/// starts right after it.
fn find_header_end(bytes: &[u8]) -> Option<usize> {
    for i in 0..bytes.len().saturating_sub(1) {
        if bytes[i] == b'\n' {
            if bytes[i + 1] == b'\n' {
                return Some(i + 2);
            }
            if bytes[i + 1] == b'\r' && bytes.get(i + 2) == Some(&b'\n') {
                return Some(i + 3);
            }
        }
    }
    None
}

fn parse_vector3(path: &Path, s: &str) -> Result<[f64; 3]> {
    let cleaned = s.trim().trim_start_matches('(').trim_end_matches(')');
    let parts: Vec<f64> = cleaned
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::malformed(path, format!("bad vector {s:?}")))?;
    if parts.len() != 3 {
        return Err(Error::malformed(path, format!("bad vector {s:?}")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

/// Accepts only axis-aligned direction vectors, e.g.
/// `(0.5,0,0) (0,0.5,0) (0,0,1)`.
fn parse_diagonal_directions(path: &Path, s: &str) -> Result<[f64; 3]> {
    let vectors: Vec<&str> = s.split_whitespace().collect();
    if vectors.len() != 3 {
        return Err(Error::Unsupported {
            path: path.into(),
            reason: format!("space directions {s:?}"),
        });
    }
    let mut spacing = [0.0f64; 3];
    for (axis, vs) in vectors.iter().enumerate() {
        let v = parse_vector3(path, vs)?;
        for (a, &c) in v.iter().enumerate() {
            if a == axis {
                spacing[axis] = c;
            } else if c != 0.0 {
                return Err(Error::Unsupported {
                    path: path.into(),
                    reason: "non-diagonal space directions".into(),
                });
            }
        }
    }
    Ok(spacing)
}
