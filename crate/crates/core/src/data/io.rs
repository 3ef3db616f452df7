//! SMMV volume container and PGM slice dumps.
//!
//! ```text
//! "SMMV0001"
//! u32 LE length | header JSON
//! intensities: C x X x Y x Z little-endian f32, C row-major
//! labels:      L x X x Y x Z bytes in {0, 1}
//! ```
//!
//! `C` and `L` are the lengths of the header's `modalities` and
//! `label_channels` lists. Probability volumes use the intensity slot and an
//! empty label list.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MultiModalVolume, Stage, LABEL_CHANNELS, MODALITIES};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const SMMV_MAGIC: &[u8; 8] = b"SMMV0001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmmvHeader {
    pub shape: [usize; 3],
    pub modalities: Vec<String>,
    pub label_channels: Vec<String>,
    pub spacing: [f32; 3],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pipeline: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmmvFile {
    pub header: SmmvHeader,
    pub intensities: Tensor<f32>,
    pub labels: Option<Tensor<f32>>,
}

pub fn encode_smmv(file: &SmmvFile) -> Result<Vec<u8>> {
    let h = &file.header;
    let vox = numel(&h.shape)?;
    let want_i = numel(&[h.modalities.len(), vox])?;
    if file.intensities.len() != want_i {
        return Err(Error::DataLength {
            shape: file.intensities.shape().to_vec(),
            expected: want_i,
            actual: file.intensities.len(),
        });
    }
    let want_l = h.label_channels.len() * vox;
    let label_len = file.labels.as_ref().map_or(0, Tensor::len);
    if label_len != want_l {
        return Err(Error::DataLength { shape: vec![h.label_channels.len(), vox], expected: want_l, actual: label_len });
    }
    let json = serde_json::to_vec(h)?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::Header("header too long".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + want_i * 4 + want_l);
    out.extend_from_slice(SMMV_MAGIC);
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    for &v in file.intensities.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = &file.labels {
        for &v in l.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::invalid("label values must be 0 or 1"));
            }
            out.push(v as u8);
        }
    }
    Ok(out)
}

pub fn decode_smmv(bytes: &[u8]) -> Result<SmmvFile> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { what: "magic", expected: 8, actual: bytes.len() as u64 });
    }
    if &bytes[..8] != SMMV_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(SMMV_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated { what: "header length", expected: 12, actual: bytes.len() as u64 });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12 + hlen;
    if bytes.len() < hend {
        return Err(Error::Truncated { what: "header", expected: hend as u64, actual: bytes.len() as u64 });
    }
    let header: SmmvHeader = serde_json::from_slice(&bytes[12..hend]).map_err(|e| Error::Header(e.to_string()))?;
    let vox = numel(&header.shape)?;
    let n_i = numel(&[header.modalities.len(), vox])?;
    let n_l = numel(&[header.label_channels.len(), vox])?;
    let expected = n_i
        .checked_mul(4)
        .and_then(|b| b.checked_add(n_l))
        .and_then(|b| b.checked_add(hend))
        .ok_or_else(|| Error::ShapeOverflow(header.shape.to_vec()))?;
    if bytes.len() != expected {
        return Err(Error::Truncated { what: "payload", expected: expected as u64, actual: bytes.len() as u64 });
    }
    let [x, y, z] = header.shape;
    let ibytes = &bytes[hend..hend + 4 * n_i];
    let intens = ibytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let intensities = Tensor::new(vec![header.modalities.len(), x, y, z], intens)?;
    let labels = if header.label_channels.is_empty() {
        None
    } else {
        let lbytes = &bytes[hend + 4 * n_i..];
        if let Some(bad) = lbytes.iter().find(|&&b| b > 1) {
            return Err(Error::Header(format!("label byte {bad} is not 0 or 1")));
        }
        let data = lbytes.iter().map(|&b| b as f32).collect();
        Some(Tensor::new(vec![header.label_channels.len(), x, y, z], data)?)
    };
    Ok(SmmvFile { header, intensities, labels })
}

pub fn write_smmv(path: &Path, file: &SmmvFile) -> Result<()> {
    let bytes = encode_smmv(file)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_smmv(path: &Path) -> Result<SmmvFile> {
    decode_smmv(&std::fs::read(path)?)
}

impl From<&MultiModalVolume> for SmmvFile {
    fn from(v: &MultiModalVolume) -> Self {
        SmmvFile {
            header: SmmvHeader {
                shape: v.dims(),
                modalities: MODALITIES.iter().map(|s| s.to_string()).collect(),
                label_channels: LABEL_CHANNELS.iter().map(|s| s.to_string()).collect(),
                spacing: v.spacing,
                pipeline: v.pipeline.clone(),
                provenance: None,
            },
            intensities: v.intensities.clone(),
            labels: Some(v.labels.clone()),
        }
    }
}

impl TryFrom<SmmvFile> for MultiModalVolume {
    type Error = Error;

    fn try_from(f: SmmvFile) -> Result<Self> {
        if f.header.modalities != MODALITIES || f.header.label_channels != LABEL_CHANNELS {
            return Err(Error::Header(format!(
                "expected modalities {:?} and labels {:?}, found {:?} / {:?}",
                MODALITIES, LABEL_CHANNELS, f.header.modalities, f.header.label_channels
            )));
        }
        let labels = f.labels.ok_or_else(|| Error::Header("volume file carries no labels".into()))?;
        let mut v = MultiModalVolume::new(f.intensities, labels, f.header.spacing)?;
        v.pipeline = f.header.pipeline;
        Ok(v)
    }
}

pub fn write_volume(path: &Path, volume: &MultiModalVolume) -> Result<()> {
    write_smmv(path, &SmmvFile::from(volume))
}

pub fn read_volume(path: &Path) -> Result<MultiModalVolume> {
    read_smmv(path)?.try_into()
}

/// Write a 2D `[H, W]` map as binary 8-bit PGM, linearly mapping `[lo, hi]` to `[0, 255]`.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f32], lo: f32, hi: f32) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::DataLength { shape: vec![h, w], expected: h * w, actual: values.len() });
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (((v - lo) / range).clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
