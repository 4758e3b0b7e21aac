//! On-disk formats: binary PGM for activation and label maps, binary PPM
//! for images, lossless CSV for activation maps, and the parameter
//! checkpoint (a JSON header followed by little-endian `f32` data).
//!
//! All writes go through a write-temp-then-rename so partially written
//! files never appear under their final name.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{ActivationMap, Label, LabelMap, MapKind};
use crate::embedding::TextualPathParams;
use crate::encoder::{ConvLayer, Encoder, EncoderConfig};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: invalid {format} data: {reason}")]
    Format {
        path: PathBuf,
        format: &'static str,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, format: &'static str, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        format,
        reason: reason.into(),
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut temp = path.as_os_str().to_owned();
    temp.push(format!(".{}.{n}.tmp", std::process::id()));
    let temp = PathBuf::from(temp);
    std::fs::write(&temp, bytes).map_err(io_err(&temp))?;
    std::fs::rename(&temp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// PGM / PPM
// ---------------------------------------------------------------------------

/// Writes an activation map as binary 8-bit PGM, values clamped to [0, 1]
/// and scaled by 255. Meant for normalized and background maps.
pub fn write_activation_pgm(map: &ActivationMap, path: &Path) -> Result<(), IoError> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    bytes.extend(
        map.values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    atomic_write(path, &bytes)
}

/// Writes a label map as binary 8-bit PGM; background is 0, class `c` is
/// `c + 1`.
pub fn write_label_pgm(map: &LabelMap, path: &Path) -> Result<(), IoError> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for label in &map.labels {
        let index = label.to_index();
        if index > 255 {
            return Err(format_err(path, "pgm", "label index exceeds 8 bits"));
        }
        bytes.push(index as u8);
    }
    atomic_write(path, &bytes)
}

/// Parses the `P5`/`P6` header, returning (width, height, data offset).
fn parse_netpbm_header(
    bytes: &[u8],
    magic: &str,
    path: &Path,
    format: &'static str,
) -> Result<(usize, usize, usize), IoError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(format_err(path, format, format!("missing {magic} magic")));
    }
    let mut fields = Vec::new();
    let mut pos = 2;
    let mut current = String::new();
    let mut in_comment = false;
    while pos < bytes.len() && fields.len() < 3 {
        let c = bytes[pos] as char;
        pos += 1;
        if in_comment {
            in_comment = c != '\n';
            continue;
        }
        match c {
            '#' => in_comment = true,
            c if c.is_ascii_whitespace() => {
                if !current.is_empty() {
                    fields.push(std::mem::take(&mut current));
                }
            }
            c => current.push(c),
        }
    }
    if fields.len() != 3 {
        return Err(format_err(path, format, "truncated header"));
    }
    let parse = |s: &String| -> Result<usize, IoError> {
        s.parse()
            .map_err(|_| format_err(path, format, format!("bad header field {s:?}")))
    };
    let width = parse(&fields[0])?;
    let height = parse(&fields[1])?;
    let maxval = parse(&fields[2])?;
    if maxval != 255 {
        return Err(format_err(path, format, "only maxval 255 is supported"));
    }
    Ok((width, height, pos))
}

/// Reads a label-map PGM written by [`write_label_pgm`].
pub fn read_label_pgm(path: &Path) -> Result<LabelMap, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (width, height, offset) = parse_netpbm_header(&bytes, "P5", path, "pgm")?;
    let data = &bytes[offset..];
    if data.len() != width * height {
        return Err(format_err(path, "pgm", "pixel count mismatch"));
    }
    Ok(LabelMap {
        width,
        height,
        labels: data.iter().map(|&b| Label::from_index(b as usize)).collect(),
    })
}

/// Writes an RGB image as binary PPM.
pub fn write_image_ppm(image: &Image, path: &Path) -> Result<(), IoError> {
    if image.channels != 3 {
        return Err(format_err(path, "ppm", "only 3-channel images"));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                bytes.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    atomic_write(path, &bytes)
}

/// Reads a binary PPM into an image with values in [0, 1].
pub fn read_image_ppm(path: &Path) -> Result<Image, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (width, height, offset) = parse_netpbm_header(&bytes, "P6", path, "ppm")?;
    let data = &bytes[offset..];
    if data.len() != width * height * 3 {
        return Err(format_err(path, "ppm", "pixel count mismatch"));
    }
    let mut image = Image::new(width, height, 3);
    let mut i = 0;
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                image.set(c, y, x, data[i] as f64 / 255.0);
                i += 1;
            }
        }
    }
    Ok(image)
}

// ---------------------------------------------------------------------------
// Activation CSV
// ---------------------------------------------------------------------------

/// Writes an activation map as CSV, one image row per line, full `f64`
/// round-trip precision.
pub fn write_activation_csv(map: &ActivationMap, path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    for row in map.values.chunks(map.width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a CSV written by [`write_activation_csv`].
pub fn read_activation_csv(path: &Path, kind: MapKind) -> Result<ActivationMap, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|_| format_err(path, "csv", format!("bad value {v:?}")))
            })
            .collect::<Result<_, _>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(format_err(path, "csv", "ragged rows"));
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| format_err(path, "csv", "empty file"))?;
    Ok(ActivationMap::from_values(width, height, values, kind))
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    in_channels: usize,
    hidden_channels: Vec<usize>,
    dim: usize,
    w_res: f64,
    tensors: Vec<TensorInfo>,
}

const CHECKPOINT_FORMAT: &str = "tamkit-checkpoint";

/// Serializes the encoder and textual-path parameters: an 8-byte
/// little-endian header length, the JSON header, then all tensors as
/// little-endian `f32`.
pub fn save_checkpoint(
    encoder: &Encoder,
    txt: &TextualPathParams,
    path: &Path,
) -> Result<(), IoError> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64], payload: &mut Vec<u8>| {
        tensors.push(TensorInfo {
            name,
            shape,
            offset: payload.len() as u64,
        });
        for &v in data {
            payload.extend((v as f32).to_le_bytes());
        }
    };
    for (i, layer) in encoder.layers.iter().enumerate() {
        push(
            format!("conv{i}.weight"),
            vec![
                layer.out_channels,
                layer.in_channels,
                layer.kernel,
                layer.kernel,
            ],
            &layer.weights,
            &mut payload,
        );
        push(
            format!("conv{i}.bias"),
            vec![layer.out_channels],
            &layer.bias,
            &mut payload,
        );
    }
    push(
        "txt.m".to_string(),
        vec![txt.dim, txt.dim],
        &txt.m_txt,
        &mut payload,
    );

    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        in_channels: encoder.config.in_channels,
        hidden_channels: encoder.config.hidden_channels.clone(),
        dim: encoder.config.dim,
        w_res: txt.w_res,
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header_json.len() + payload.len());
    bytes.extend((header_json.len() as u64).to_le_bytes());
    bytes.extend(header_json);
    bytes.extend(payload);
    atomic_write(path, &bytes)
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Encoder, TextualPathParams), IoError> {
    let mut file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() < 8 {
        return Err(format_err(path, "checkpoint", "file too short"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(format_err(path, "checkpoint", "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| format_err(path, "checkpoint", e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(format_err(path, "checkpoint", "unknown format tag"));
    }
    let payload = &bytes[8 + header_len..];

    let read_tensor = |name: &str, expect_len: usize| -> Result<Vec<f64>, IoError> {
        let info = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| format_err(path, "checkpoint", format!("missing tensor {name}")))?;
        let start = info.offset as usize;
        let end = start + expect_len * 4;
        if end > payload.len() {
            return Err(format_err(
                path,
                "checkpoint",
                format!("tensor {name} out of bounds"),
            ));
        }
        Ok(payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };

    let config = EncoderConfig {
        in_channels: header.in_channels,
        hidden_channels: header.hidden_channels.clone(),
        dim: header.dim,
    };
    let channels = config.channels();
    let mut layers = Vec::new();
    for (i, w) in channels.windows(2).enumerate() {
        let kernel = if i == channels.len() - 2 { 1 } else { 3 };
        let weights = read_tensor(&format!("conv{i}.weight"), w[0] * w[1] * kernel * kernel)?;
        let bias = read_tensor(&format!("conv{i}.bias"), w[1])?;
        layers.push(ConvLayer {
            in_channels: w[0],
            out_channels: w[1],
            kernel,
            weights,
            bias,
        });
    }
    let m_txt = read_tensor("txt.m", header.dim * header.dim)?;
    Ok((
        Encoder { config, layers },
        TextualPathParams {
            m_txt,
            w_res: header.w_res,
            dim: header.dim,
        },
    ))
}
