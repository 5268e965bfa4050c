//! Weight tensors, whole-model containers and the JSQW float-model file format.
//!
//! JSQW layout (all integers little-endian):
//!
//! ```text
//! "JSQW" | version u16 = 1 | float_width_bits u16 | tensor_count u16
//! per tensor:
//!     name_len u8 | name (UTF-8) | rank u8 | dims u32 * rank
//!     has_cell_index u8 | cell_index u16 | values (IEEE-754, float_width_bits each)
//! metadata_len u32 | metadata (UTF-8 JSON object)
//! ```
//!
//! The cell index slot is always written; it is zero when `has_cell_index` is zero.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::quantizer::QuantizedTensor;
use crate::wire::{put_u16, put_u32, ByteReader};

pub const FLOAT_MAGIC: [u8; 4] = *b"JSQW";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_TENSORS: usize = u16::MAX as usize;
pub const MAX_NAME_LEN: usize = u8::MAX as usize;

/// Size of the fixed JSQW header preceding the first tensor record.
pub const FLOAT_HEADER_BYTES: usize = 4 + 2 + 2 + 2;

/// Storage width of full-precision values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum FloatWidth {
    F16,
    F32,
    F64,
}

impl FloatWidth {
    pub fn bits(self) -> u16 {
        match self {
            FloatWidth::F16 => 16,
            FloatWidth::F32 => 32,
            FloatWidth::F64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    /// Rounds `v` to the nearest value representable at this width.
    pub fn round(self, v: f64) -> f64 {
        match self {
            FloatWidth::F16 => f16::from_f64(v).to_f64(),
            FloatWidth::F32 => v as f32 as f64,
            FloatWidth::F64 => v,
        }
    }

    fn put(self, out: &mut Vec<u8>, v: f64) {
        match self {
            FloatWidth::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            FloatWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            FloatWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn get(self, b: &[u8]) -> f64 {
        match self {
            FloatWidth::F16 => f16::from_le_bytes([b[0], b[1]]).to_f64(),
            FloatWidth::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            FloatWidth::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        }
    }
}

impl TryFrom<u16> for FloatWidth {
    type Error = Error;

    fn try_from(bits: u16) -> Result<Self> {
        match bits {
            16 => Ok(FloatWidth::F16),
            32 => Ok(FloatWidth::F32),
            64 => Ok(FloatWidth::F64),
            other => Err(Error::Invariant(format!(
                "float width {other} not in {{16, 32, 64}}"
            ))),
        }
    }
}

impl From<FloatWidth> for u16 {
    fn from(w: FloatWidth) -> u16 {
        w.bits()
    }
}

impl Default for FloatWidth {
    fn default() -> Self {
        FloatWidth::F32
    }
}

/// A named weight tensor, values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Cell the tensor belongs to; `None` marks stem/classifier weights.
    pub cell_index: Option<u16>,
}

impl WeightTensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
        cell_index: Option<u16>,
    ) -> Result<Self> {
        let t = Self {
            name: name.into(),
            shape,
            values,
            cell_index,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Invariant("tensor name is empty".into()));
        }
        if self.name.len() > MAX_NAME_LEN {
            return Err(Error::Invariant(format!(
                "tensor name {:?} longer than {MAX_NAME_LEN} bytes",
                self.name
            )));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Invariant(format!("tensor {:?} rank too large", self.name)));
        }
        if let Some(d) = self.shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Invariant(format!(
                "tensor {:?} has invalid dimension {d}",
                self.name
            )));
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.values.len() {
            return Err(Error::Invariant(format!(
                "tensor {:?}: shape product {expected} != value count {}",
                self.name,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(self.name.clone()));
        }
        Ok(())
    }
}

fn check_unique_names<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Invariant(format!("duplicate tensor name {n:?}")));
        }
    }
    Ok(())
}

/// Number of cells referenced by `cell_index` tags, checking the tags form `0..count`.
pub fn tagged_cell_count(tensors: &[WeightTensor]) -> Result<usize> {
    let cells: BTreeSet<u16> = tensors.iter().filter_map(|t| t.cell_index).collect();
    match cells.iter().next_back() {
        None => Ok(0),
        Some(&max) if cells.len() == max as usize + 1 => Ok(cells.len()),
        Some(_) => Err(Error::Invariant(format!(
            "cell indices {cells:?} are not a contiguous range starting at 0"
        ))),
    }
}

/// A full-precision model: ordered tensors plus string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatModel {
    pub tensors: Vec<WeightTensor>,
    pub metadata: BTreeMap<String, String>,
    pub float_width: FloatWidth,
}

impl FloatModel {
    /// Builds a model, rounding every value to `float_width` so the in-memory
    /// model is exactly what the file stores.
    pub fn new(
        mut tensors: Vec<WeightTensor>,
        metadata: BTreeMap<String, String>,
        float_width: FloatWidth,
    ) -> Result<Self> {
        for t in &mut tensors {
            for v in &mut t.values {
                *v = float_width.round(*v);
            }
        }
        let m = Self {
            tensors,
            metadata,
            float_width,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(Error::EmptyModel);
        }
        if self.tensors.len() > MAX_TENSORS {
            return Err(Error::Invariant(format!(
                "{} tensors exceeds the {MAX_TENSORS} limit",
                self.tensors.len()
            )));
        }
        for t in &self.tensors {
            t.validate()?;
            if t.values.iter().any(|&v| self.float_width.round(v).to_bits() != v.to_bits()) {
                return Err(Error::Invariant(format!(
                    "tensor {:?} holds values not representable at {} bits",
                    t.name,
                    self.float_width.bits()
                )));
            }
        }
        check_unique_names(self.tensors.iter().map(|t| t.name.as_str()))?;
        tagged_cell_count(&self.tensors)?;
        Ok(())
    }

    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(WeightTensor::len).sum()
    }

    /// Number of cells referenced by tensor tags.
    pub fn cell_count(&self) -> usize {
        tagged_cell_count(&self.tensors).unwrap_or(0)
    }

    pub fn tensor(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Full-precision storage cost `f * N`, headers excluded.
pub fn float_size_bits(model: &FloatModel) -> u64 {
    model.float_width.bits() as u64 * model.value_count() as u64
}

pub(crate) fn put_tensor_record(out: &mut Vec<u8>, t: &WeightTensor, width: FloatWidth) {
    put_name_and_shape(out, &t.name, &t.shape);
    out.push(t.cell_index.is_some() as u8);
    put_u16(out, t.cell_index.unwrap_or(0));
    out.reserve(t.values.len() * width.bytes());
    for &v in &t.values {
        width.put(out, v);
    }
}

pub(crate) fn put_name_and_shape(out: &mut Vec<u8>, name: &str, shape: &[usize]) {
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        put_u32(out, d as u32);
    }
}

pub(crate) fn read_name_and_shape(r: &mut ByteReader<'_>) -> Result<(String, Vec<usize>)> {
    let len = r.u8("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "tensor name")?)
        .map_err(|e| Error::Invariant(format!("tensor name is not UTF-8: {e}")))?
        .to_owned();
    let rank = r.u8("tensor rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor dims")? as usize);
    }
    Ok((name, shape))
}

pub(crate) fn read_tensor_record(r: &mut ByteReader<'_>, width: FloatWidth) -> Result<WeightTensor> {
    let (name, shape) = read_name_and_shape(r)?;
    let has_cell = r.u8("cell index flag")?;
    let cell = r.u16("cell index")?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Invariant(format!("tensor {name:?} shape overflows")))?;
    let bytes = count
        .checked_mul(width.bytes())
        .ok_or(Error::Truncated("tensor values"))?;
    let raw = r.take(bytes, "tensor values")?;
    let values: Vec<f64> = raw.chunks_exact(width.bytes()).map(|c| width.get(c)).collect();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NanPayload(name));
    }
    let t = WeightTensor {
        name,
        shape,
        values,
        cell_index: (has_cell != 0).then_some(cell),
    };
    t.validate()?;
    Ok(t)
}

pub(crate) fn put_metadata(out: &mut Vec<u8>, metadata: &BTreeMap<String, String>) {
    let json = serde_json::to_string(metadata).expect("string map always serializes");
    put_u32(out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
}

pub(crate) fn read_metadata(r: &mut ByteReader<'_>) -> Result<BTreeMap<String, String>> {
    let len = r.u32("metadata length")? as usize;
    let raw = r.take(len, "metadata")?;
    Ok(serde_json::from_slice(raw)?)
}

/// Serializes a float model into JSQW bytes.
pub fn float_model_bytes(model: &FloatModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::with_capacity(FLOAT_HEADER_BYTES + model.value_count() * model.float_width.bytes() + 64);
    out.extend_from_slice(&FLOAT_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    put_u16(&mut out, model.float_width.bits());
    put_u16(&mut out, model.tensors.len() as u16);
    for t in &model.tensors {
        put_tensor_record(&mut out, t, model.float_width);
    }
    put_metadata(&mut out, &model.metadata);
    Ok(out)
}

/// Writes a JSQW container to `sink`, returning the number of bytes written.
pub fn save_float_model<W: Write>(model: &FloatModel, mut sink: W) -> Result<usize> {
    let bytes = float_model_bytes(model)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len())
}

/// Parses JSQW bytes.
pub fn parse_float_model(bytes: &[u8]) -> Result<FloatModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(FLOAT_MAGIC)?;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let width = FloatWidth::try_from(r.u16("float width")?)?;
    let count = r.u16("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor_record(&mut r, width)?);
    }
    let metadata = read_metadata(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Invariant("trailing bytes after metadata".into()));
    }
    let m = FloatModel {
        tensors,
        metadata,
        float_width: width,
    };
    m.validate()?;
    Ok(m)
}

/// Reads a JSQW container from `source`.
pub fn load_float_model<R: Read>(mut source: R) -> Result<FloatModel> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_float_model(&bytes)
}

/// A model whose tagged tensors are quantized and entropy-coded.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub tensors: Vec<QuantizedTensor>,
    /// Tensors kept at full precision.
    pub exempt_tensors: Vec<WeightTensor>,
    pub exempt_width: FloatWidth,
    pub metadata: BTreeMap<String, String>,
    /// Scale, codebook and coded-symbol bits of every quantized tensor plus
    /// `f * n` for every exempt tensor.
    pub total_bits: u64,
}

impl QuantizedModel {
    /// Entropy-codes every quantized tensor that lacks a payload and computes `total_bits`.
    pub fn new(
        mut tensors: Vec<QuantizedTensor>,
        mut exempt_tensors: Vec<WeightTensor>,
        exempt_width: FloatWidth,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        for t in &mut tensors {
            if t.codec_payload.is_none() {
                t.encode_payload()?;
            }
        }
        for t in &mut exempt_tensors {
            for v in &mut t.values {
                *v = exempt_width.round(*v);
            }
        }
        let mut m = Self {
            tensors,
            exempt_tensors,
            exempt_width,
            metadata,
            total_bits: 0,
        };
        m.total_bits = m.payload_bits();
        m.validate()?;
        Ok(m)
    }

    pub fn payload_bits(&self) -> u64 {
        let quantized: u64 = self.tensors.iter().map(codec::tensor_payload_bits).sum();
        let exempt: u64 = self
            .exempt_tensors
            .iter()
            .map(|t| t.len() as u64 * self.exempt_width.bits() as u64)
            .sum();
        quantized + exempt
    }

    pub fn validate(&self) -> Result<()> {
        if self.tensors.is_empty() && self.exempt_tensors.is_empty() {
            return Err(Error::EmptyModel);
        }
        if self.tensors.len() > MAX_TENSORS || self.exempt_tensors.len() > MAX_TENSORS {
            return Err(Error::Invariant("too many tensors".into()));
        }
        for t in &self.tensors {
            t.validate()?;
        }
        for t in &self.exempt_tensors {
            t.validate()?;
        }
        check_unique_names(
            self.tensors
                .iter()
                .map(|t| t.name.as_str())
                .chain(self.exempt_tensors.iter().map(|t| t.name.as_str())),
        )?;
        if self.total_bits != self.payload_bits() {
            return Err(Error::Invariant(format!(
                "total_bits {} != payload bits {}",
                self.total_bits,
                self.payload_bits()
            )));
        }
        Ok(())
    }
}
