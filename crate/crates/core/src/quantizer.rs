//! Bucketed linear-scaling quantization.
//!
//! Each run of `k` consecutive values is min-max scaled into `[0, 1]`, snapped to
//! the grid `{0, 1/2^b, ..., 1}` and stored as integer codes plus one `(mu, nu)`
//! pair per bucket. Scale parameters are kept as `f32` because that is what the
//! JSQQ container stores; `mu` is rounded down and `nu` up so the stored pair
//! still covers the bucket.

use serde::{Deserialize, Serialize};

use crate::codec::CodecPayload;
use crate::error::{Error, Result};
use crate::tensor_model::WeightTensor;

/// Buckets with a range below this are encoded as constants.
pub const DEGENERATE_RANGE: f64 = 1e-12;

pub const DEFAULT_BUCKET_SIZE: usize = 256;

/// Quantization bit-width `b`, `1 <= b <= 30`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const MAX: u8 = 30;

    pub fn new(bits: u8) -> Result<Self> {
        if (1..=Self::MAX).contains(&bits) {
            Ok(Self(bits))
        } else {
            Err(Error::InvalidArgument(format!(
                "bit width {bits} outside 1..={}",
                Self::MAX
            )))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Number of grid intervals, `2^b`.
    pub fn levels(self) -> u32 {
        1u32 << self.0
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.0
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-bucket offset `mu` and range `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub mu: f32,
    pub nu: f32,
}

impl ScaleParams {
    pub fn is_degenerate(&self) -> bool {
        self.nu == 0.0
    }

    pub fn restore(&self, unit: f64) -> f64 {
        self.nu as f64 * unit + self.mu as f64
    }
}

fn f32_at_most(x: f64) -> f32 {
    let f = x as f32;
    if f as f64 > x {
        f.next_down()
    } else {
        f
    }
}

fn f32_at_least(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64) < x {
        f.next_up()
    } else {
        f
    }
}

/// Min-max scales one bucket into `[0, 1]`.
pub fn scale_bucket(values: &[f64]) -> Result<(Vec<f64>, ScaleParams)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot scale an empty bucket".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bucket".into()));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max - min < DEGENERATE_RANGE {
        let params = ScaleParams {
            mu: min as f32,
            nu: 0.0,
        };
        return Ok((vec![0.0; values.len()], params));
    }
    let mu = f32_at_most(min);
    let mut nu = f32_at_least(max - mu as f64);
    while (mu as f64) + (nu as f64) < max {
        nu = nu.next_up();
    }
    let (mu64, nu64) = (mu as f64, nu as f64);
    let scaled = values
        .iter()
        .map(|&v| ((v - mu64) / nu64).clamp(0.0, 1.0))
        .collect();
    Ok((scaled, ScaleParams { mu, nu }))
}

/// Snaps `x` in `[0, 1]` to the `b`-bit grid, rounding up only when the
/// fractional part strictly exceeds one half. Returns `(grid_value, code)`.
pub fn quantize_unit(x: f64, b: BitWidth) -> Result<(f64, u32)> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!("{x} is outside [0, 1]")));
    }
    let levels = b.levels() as f64;
    let scaled = x * levels;
    let floor = scaled.floor();
    let up = (scaled - floor > 0.5) as u32;
    let code = floor as u32 + up;
    Ok((code as f64 / levels, code))
}

/// A weight tensor stored as per-bucket scales and integer codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub cell_index: Option<u16>,
    pub bit_width: BitWidth,
    pub bucket_size: usize,
    pub scales: Vec<ScaleParams>,
    pub codes: Vec<u32>,
    pub codec_payload: Option<CodecPayload>,
}

impl QuantizedTensor {
    pub fn value_count(&self) -> usize {
        self.codes.len()
    }

    pub fn bucket_count(&self) -> usize {
        self.codes.len().div_ceil(self.bucket_size)
    }

    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if expected != self.codes.len() {
            return Err(Error::Invariant(format!(
                "quantized tensor {:?}: shape product {expected} != code count {}",
                self.name,
                self.codes.len()
            )));
        }
        if self.bucket_size < 2 {
            return Err(Error::Invariant(format!("bucket size {} < 2", self.bucket_size)));
        }
        if self.scales.len() != self.bucket_count() {
            return Err(Error::Invariant(format!(
                "quantized tensor {:?}: {} scales for {} buckets",
                self.name,
                self.scales.len(),
                self.bucket_count()
            )));
        }
        let top = self.bit_width.levels();
        if let Some(c) = self.codes.iter().find(|&&c| c > top) {
            return Err(Error::Invariant(format!(
                "code {c} exceeds 2^{} in tensor {:?}",
                self.bit_width, self.name
            )));
        }
        if self
            .scales
            .iter()
            .any(|s| !s.mu.is_finite() || !s.nu.is_finite() || s.nu < 0.0)
        {
            return Err(Error::Invariant(format!("invalid scale in tensor {:?}", self.name)));
        }
        Ok(())
    }

    /// Largest `nu_j * 2^-(b+1)` over all buckets.
    pub fn max_error_bound(&self) -> f64 {
        let half_step = 0.5 / self.bit_width.levels() as f64;
        self.scales
            .iter()
            .map(|s| s.nu as f64 * half_step)
            .fold(0.0, f64::max)
    }

    pub fn encode_payload(&mut self) -> Result<()> {
        self.codec_payload = Some(CodecPayload::for_codes(&self.codes, self.bit_width)?);
        Ok(())
    }
}

/// Quantizes `tensor` with `b` bits in buckets of `k` consecutive values.
pub fn quantize_tensor(tensor: &WeightTensor, b: BitWidth, k: usize) -> Result<QuantizedTensor> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("bucket size {k} < 2")));
    }
    tensor.validate()?;
    let mut scales = Vec::with_capacity(tensor.len().div_ceil(k));
    let mut codes = Vec::with_capacity(tensor.len());
    for bucket in tensor.values.chunks(k) {
        let (scaled, params) = scale_bucket(bucket)?;
        scales.push(params);
        for x in scaled {
            codes.push(quantize_unit(x, b)?.1);
        }
    }
    Ok(QuantizedTensor {
        name: tensor.name.clone(),
        shape: tensor.shape.clone(),
        cell_index: tensor.cell_index,
        bit_width: b,
        bucket_size: k,
        scales,
        codes,
        codec_payload: None,
    })
}

/// Restores `w_i = nu_j * code_i / 2^b + mu_j`.
pub fn dequantize_tensor(qt: &QuantizedTensor) -> Result<WeightTensor> {
    qt.validate()?;
    let levels = qt.bit_width.levels() as f64;
    let mut values = Vec::with_capacity(qt.codes.len());
    for (bucket, params) in qt.codes.chunks(qt.bucket_size).zip(&qt.scales) {
        if params.is_degenerate() {
            values.extend(std::iter::repeat(params.mu as f64).take(bucket.len()));
        } else {
            values.extend(bucket.iter().map(|&c| params.restore(c as f64 / levels)));
        }
    }
    WeightTensor::new(qt.name.clone(), qt.shape.clone(), values, qt.cell_index)
}

/// Compression ratio `k f / (k b + 2 f)` of a bucketed vector.
pub fn theoretical_ratio(k: usize, f: u32, b: BitWidth) -> f64 {
    let (k, f, b) = (k as f64, f as f64, b.bits() as f64);
    k * f / (k * b + 2.0 * f)
}

/// Storage bits `b n + 2 f ceil(n / k)`.
pub fn theoretical_bits(n: usize, b: BitWidth, k: usize, f: u32) -> u64 {
    b.bits() as u64 * n as u64 + 2 * f as u64 * n.div_ceil(k) as u64
}
