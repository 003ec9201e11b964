//! Lossy encodings for server-to-client matrices.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::comm::Precision;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Bytes of the `(min, step)` header of a quantized matrix.
pub const QUANT_HEADER_BYTES: u64 = 16;
/// Bytes of one sparse index.
pub const SPARSE_INDEX_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompressionMode {
    #[default]
    None,
    HalfPrecision,
    QuantUniform,
    SparsifyTopk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionSpec {
    pub mode: CompressionMode,
    /// Quantizer bits, 8 or 16.
    pub bits: u32,
    /// Fraction of entries kept by top-k sparsification, in (0, 1].
    pub keep_fraction: f64,
}

impl Default for CompressionSpec {
    fn default() -> Self {
        Self {
            mode: CompressionMode::None,
            bits: 8,
            keep_fraction: 1.0,
        }
    }
}

impl CompressionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn half() -> Self {
        Self {
            mode: CompressionMode::HalfPrecision,
            ..Self::default()
        }
    }

    pub fn quant(bits: u32) -> Self {
        Self {
            mode: CompressionMode::QuantUniform,
            bits,
            ..Self::default()
        }
    }

    pub fn topk(keep_fraction: f64) -> Self {
        Self {
            mode: CompressionMode::SparsifyTopk,
            keep_fraction,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits != 8 && self.bits != 16 {
            return Err(Error::InvalidCompression(format!(
                "bits must be 8 or 16, got {}",
                self.bits
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidCompression(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Dense(Vec<f64>),
    Half(Vec<f16>),
    Quant {
        min: f64,
        step: f64,
        codes: Vec<u16>,
    },
    Sparse {
        indices: Vec<u32>,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    rows: usize,
    cols: usize,
    payload: Payload,
    bytes: u64,
    entries: u64,
}

impl Encoded {
    /// Exact wire size.
    pub fn encoded_bytes(&self) -> u64 {
        self.bytes
    }

    /// Number of transmitted values.
    pub fn entries(&self) -> u64 {
        self.entries
    }

    pub fn decode(&self) -> DenseMatrix {
        let data = match &self.payload {
            Payload::Dense(v) => v.clone(),
            Payload::Half(v) => v.iter().map(|h| h.to_f64()).collect(),
            Payload::Quant { min, step, codes } => {
                codes.iter().map(|&c| min + f64::from(c) * step).collect()
            }
            Payload::Sparse { indices, values } => {
                let mut out = vec![0.0; self.rows * self.cols];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out
            }
        };
        DenseMatrix::from_vec(self.rows, self.cols, data).expect("payload length matches shape")
    }
}

/// Encodes `m`. Uncompressed and sparse values are counted at `precision`;
/// half precision and quantization fix their own width.
pub fn compress(m: &DenseMatrix, spec: &CompressionSpec, precision: Precision) -> Result<Encoded> {
    spec.validate()?;
    let (rows, cols) = m.shape();
    let n = m.as_slice().len() as u64;
    let (payload, entries, bytes) = match spec.mode {
        CompressionMode::None => (
            Payload::Dense(m.as_slice().to_vec()),
            n,
            n * precision.bytes_per_entry(),
        ),
        CompressionMode::HalfPrecision => (
            Payload::Half(m.as_slice().iter().map(|&v| f16::from_f64(v)).collect()),
            n,
            n * 2,
        ),
        CompressionMode::QuantUniform => {
            let (min, step, codes) = quantize(m.as_slice(), spec.bits);
            let bytes = QUANT_HEADER_BYTES + (n * u64::from(spec.bits)).div_ceil(8);
            (Payload::Quant { min, step, codes }, n, bytes)
        }
        CompressionMode::SparsifyTopk => {
            let (indices, values) = top_k(m.as_slice(), spec.keep_fraction);
            let kept = indices.len() as u64;
            let bytes = kept * (SPARSE_INDEX_BYTES + precision.bytes_per_entry());
            (Payload::Sparse { indices, values }, kept, bytes)
        }
    };
    Ok(Encoded {
        rows,
        cols,
        payload,
        bytes,
        entries,
    })
}

/// Affine uniform quantizer over `[min, max]` with `2^bits` levels.
fn quantize(values: &[f64], bits: u32) -> (f64, f64, Vec<u16>) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max <= min {
        let base = if values.is_empty() { 0.0 } else { min };
        return (base, 0.0, vec![0; values.len()]);
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let step = (max - min) / levels;
    let codes = values
        .iter()
        .map(|&v| ((v - min) / step).round().clamp(0.0, levels) as u16)
        .collect();
    (min, step, codes)
}

/// Keeps the largest-magnitude entries, ties broken by the lower index.
fn top_k(values: &[f64], keep_fraction: f64) -> (Vec<u32>, Vec<f64>) {
    let n = values.len();
    let kept = ((keep_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    order.truncate(kept);
    order.sort_unstable();
    let indices = order.iter().map(|&i| i as u32).collect();
    let vals = order.iter().map(|&i| values[i]).collect();
    (indices, vals)
}
