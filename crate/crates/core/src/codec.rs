//! Canonical Huffman coding of quantization codes and the JSQQ container.
//!
//! Codes are assigned in (length, symbol) order, so a codebook is fully described
//! by its per-symbol lengths. Bits are packed most-significant first.
//!
//! JSQQ layout (all integers little-endian):
//!
//! ```text
//! "JSQQ" | version u16 = 1 | tensor_count u16
//! per quantized tensor:
//!     name_len u8 | name | rank u8 | dims u32 * rank
//!     bit_width u8 | bucket_size u32 | bucket_count u32 | (mu f32, nu f32) * bucket_count
//!     codebook: layout u8 | alphabet u32 | layout 0: code length u8 * alphabet
//!                                          | layout 1: used u32 | (symbol u32, length u8) * used
//!     bit_count u64 | payload (ceil(bit_count / 8) bytes)
//! exempt section: float_width_bits u16 | tensor_count u16 | JSQW tensor records
//! metadata_len u32 | metadata (UTF-8 JSON object)
//! ```

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::quantizer::{BitWidth, QuantizedTensor, ScaleParams};
use crate::tensor_model::{
    put_metadata, put_name_and_shape, put_tensor_record, read_metadata, read_name_and_shape,
    read_tensor_record, FloatWidth, QuantizedModel, FORMAT_VERSION,
};
use crate::wire::{put_u16, put_u32, put_u64, ByteReader};

pub const QUANTIZED_MAGIC: [u8; 4] = *b"JSQQ";

/// Canonical ordering rule used for code assignment.
pub const CANONICAL_ORDER: &str = "length-then-symbol";

/// Longest code the coder will emit.
pub const MAX_CODE_LEN: u8 = 63;

/// Widest bit-width the container can entropy-code.
pub const MAX_CODED_BITS: u8 = 16;

const DENSE_LAYOUT: u8 = 0;
const SPARSE_LAYOUT: u8 = 1;

/// Metadata key carrying the cell tags of quantized tensors inside JSQQ files.
pub const CELL_TAGS_KEY: &str = "quantized_cell_index";

/// Per-symbol code lengths of a canonical prefix code; zero marks an absent symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codebook {
    lengths: Vec<u8>,
}

impl Codebook {
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        if lengths.is_empty() || lengths.iter().all(|&l| l == 0) {
            return Err(Error::InvalidArgument("codebook has no symbols".into()));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > MAX_CODE_LEN) {
            return Err(Error::InvalidArgument(format!("code length {l} exceeds {MAX_CODE_LEN}")));
        }
        let book = Self { lengths };
        if book.kraft_sum() > 1.0 {
            return Err(Error::InvalidArgument("code lengths violate the Kraft inequality".into()));
        }
        Ok(book)
    }

    pub fn symbol_count(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn kraft_sum(&self) -> f64 {
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| (-(l as f64)).exp2())
            .sum()
    }

    /// Symbols with nonzero length, in canonical order.
    fn canonical_symbols(&self) -> Vec<u32> {
        let mut syms: Vec<u32> = (0..self.lengths.len() as u32)
            .filter(|&s| self.lengths[s as usize] > 0)
            .collect();
        syms.sort_by_key(|&s| (self.lengths[s as usize], s));
        syms
    }

    /// Canonical code value of every symbol (meaningless for absent symbols).
    pub fn codes(&self) -> Vec<u64> {
        let mut codes = vec![0u64; self.lengths.len()];
        let mut next = 0u64;
        let mut prev_len = 0u8;
        for (i, s) in self.canonical_symbols().into_iter().enumerate() {
            let len = self.lengths[s as usize];
            if i > 0 {
                next = (next + 1) << (len - prev_len);
            } else {
                next <<= len;
            }
            codes[s as usize] = next;
            prev_len = len;
        }
        codes
    }

    /// Total coded length `sum(freq * len)`.
    pub fn cost(&self, frequencies: &[u64]) -> u64 {
        frequencies
            .iter()
            .zip(&self.lengths)
            .map(|(&f, &l)| f * l as u64)
            .sum()
    }
}

/// Builds an optimal prefix code for `frequencies`.
///
/// A lone symbol gets a 1-bit code.
pub fn build_codebook(frequencies: &[u64]) -> Result<Codebook> {
    let present: Vec<usize> = (0..frequencies.len()).filter(|&s| frequencies[s] > 0).collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("all frequencies are zero".into()));
    }
    let mut lengths = vec![0u8; frequencies.len()];
    if present.len() == 1 {
        lengths[present[0]] = 1;
        return Codebook::from_lengths(lengths);
    }

    // nodes [0, present.len()) are leaves; internal nodes are appended.
    let mut parent: Vec<usize> = vec![usize::MAX; present.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = present
        .iter()
        .enumerate()
        .map(|(node, &s)| Reverse((frequencies[s], node)))
        .collect();
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("heap has two nodes");
        let Reverse((wb, b)) = heap.pop().expect("heap has two nodes");
        let node = parent.len();
        parent.push(usize::MAX);
        parent[a] = node;
        parent[b] = node;
        heap.push(Reverse((wa + wb, node)));
    }
    let mut depth = vec![0u32; parent.len()];
    for node in (0..parent.len()).rev() {
        if parent[node] != usize::MAX {
            depth[node] = depth[parent[node]] + 1;
        }
    }
    for (leaf, &s) in present.iter().enumerate() {
        if depth[leaf] > MAX_CODE_LEN as u32 {
            return Err(Error::InvalidArgument(format!(
                "code length {} exceeds {MAX_CODE_LEN}",
                depth[leaf]
            )));
        }
        lengths[s] = depth[leaf] as u8;
    }
    Codebook::from_lengths(lengths)
}

/// A packed bitstream, most significant bit first, zero padded.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EncodedStream {
    pub bit_count: u64,
    pub payload: Vec<u8>,
}

impl EncodedStream {
    pub fn validate(&self) -> Result<()> {
        if self.payload.len() as u64 != self.bit_count.div_ceil(8) {
            return Err(Error::Invariant(format!(
                "payload of {} bytes cannot hold exactly {} bits",
                self.payload.len(),
                self.bit_count
            )));
        }
        let used = (self.bit_count % 8) as u32;
        if used != 0 {
            let last = *self.payload.last().expect("nonempty");
            if last & (0xFFu8 >> used) != 0 {
                return Err(Error::Invariant("nonzero pad bits".into()));
            }
        }
        Ok(())
    }

    fn bit(&self, pos: u64) -> u8 {
        (self.payload[(pos / 8) as usize] >> (7 - pos % 8)) & 1
    }
}

struct BitWriter {
    out: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    fn put(&mut self, code: u64, len: u8) {
        for i in (0..len).rev() {
            if self.bits % 8 == 0 {
                self.out.push(0);
            }
            let bit = ((code >> i) & 1) as u8;
            *self.out.last_mut().expect("pushed") |= bit << (7 - self.bits % 8);
            self.bits += 1;
        }
    }
}

/// Concatenates the canonical codes of `symbols`.
pub fn encode(symbols: &[u32], book: &Codebook) -> Result<EncodedStream> {
    let codes = book.codes();
    let mut w = BitWriter {
        out: Vec::with_capacity(symbols.len()),
        bits: 0,
    };
    for &s in symbols {
        let len = *book.lengths.get(s as usize).ok_or(Error::SymbolAbsent(s))?;
        if len == 0 {
            return Err(Error::SymbolAbsent(s));
        }
        w.put(codes[s as usize], len);
    }
    Ok(EncodedStream {
        bit_count: w.bits,
        payload: w.out,
    })
}

/// Decodes exactly `count` symbols from `stream`.
pub fn decode(stream: &EncodedStream, book: &Codebook, count: usize) -> Result<Vec<u32>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    stream.validate()?;
    let max_len = *book.lengths.iter().max().expect("nonempty") as usize;
    let mut per_len = vec![0u64; max_len + 1];
    for &l in &book.lengths {
        if l > 0 {
            per_len[l as usize] += 1;
        }
    }
    let ordered = book.canonical_symbols();
    let mut out = Vec::with_capacity(count);
    let mut pos = 0u64;
    while out.len() < count {
        let start = pos;
        let (mut code, mut first, mut index) = (0u64, 0u64, 0u64);
        let mut symbol = None;
        for &n in &per_len[1..] {
            if pos >= stream.bit_count {
                return Err(Error::Exhausted(stream.bit_count));
            }
            code |= stream.bit(pos) as u64;
            pos += 1;
            if code < first + n {
                symbol = Some(ordered[(index + code - first) as usize]);
                break;
            }
            index += n;
            first = (first + n) << 1;
            code <<= 1;
        }
        out.push(symbol.ok_or(Error::InvalidPrefix(start))?);
    }
    Ok(out)
}

/// Codebook and coded symbols of one quantized tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodecPayload {
    pub codebook: Codebook,
    pub stream: EncodedStream,
}

impl CodecPayload {
    /// Huffman-codes `codes`, whose alphabet is `{0, ..., 2^b}`.
    pub fn for_codes(codes: &[u32], b: BitWidth) -> Result<Self> {
        if b.bits() > MAX_CODED_BITS {
            return Err(Error::InvalidArgument(format!(
                "bit width {b} above {MAX_CODED_BITS} cannot be entropy-coded"
            )));
        }
        let top = codes.iter().copied().max().unwrap_or(0);
        if top > b.levels() {
            return Err(Error::SymbolAbsent(top));
        }
        let mut freq = vec![0u64; top as usize + 1];
        for &c in codes {
            freq[c as usize] += 1;
        }
        if codes.is_empty() {
            freq[0] = 1;
        }
        let codebook = build_codebook(&freq)?;
        let stream = encode(codes, &codebook)?;
        Ok(Self { codebook, stream })
    }
}

fn sparse_table_bytes(used: usize) -> usize {
    1 + 4 + 4 + 5 * used
}

fn dense_table_bytes(alphabet: usize) -> usize {
    1 + 4 + alphabet
}

/// Serialized codebook size: lengths for the whole alphabet, or
/// (symbol, length) pairs for the used symbols when that is smaller.
pub fn codebook_table_bytes(book: &Codebook) -> usize {
    let used = book.lengths.iter().filter(|&&l| l > 0).count();
    dense_table_bytes(book.symbol_count()).min(sparse_table_bytes(used))
}

fn put_codebook(out: &mut Vec<u8>, book: &Codebook) {
    let used: Vec<(usize, u8)> = book.lengths.iter().copied().enumerate().filter(|&(_, l)| l > 0).collect();
    if sparse_table_bytes(used.len()) < dense_table_bytes(book.symbol_count()) {
        out.push(SPARSE_LAYOUT);
        put_u32(out, book.symbol_count() as u32);
        put_u32(out, used.len() as u32);
        for (symbol, len) in used {
            put_u32(out, symbol as u32);
            out.push(len);
        }
    } else {
        out.push(DENSE_LAYOUT);
        put_u32(out, book.symbol_count() as u32);
        out.extend_from_slice(&book.lengths);
    }
}

fn read_codebook(r: &mut ByteReader<'_>) -> Result<Codebook> {
    let layout = r.u8("codebook layout")?;
    let alphabet = r.u32("alphabet size")? as usize;
    match layout {
        DENSE_LAYOUT => Codebook::from_lengths(r.take(alphabet, "codebook")?.to_vec()),
        SPARSE_LAYOUT => {
            let used = r.u32("codebook entries")? as usize;
            if used > alphabet || alphabet > 1 << 24 {
                return Err(Error::Invariant("codebook entry count exceeds alphabet".into()));
            }
            let mut lengths = vec![0u8; alphabet];
            let mut last = None;
            for _ in 0..used {
                let symbol = r.u32("codebook")? as usize;
                let len = r.u8("codebook")?;
                if symbol >= alphabet || last.is_some_and(|l| symbol <= l) || len == 0 {
                    return Err(Error::Invariant("malformed sparse codebook".into()));
                }
                lengths[symbol] = len;
                last = Some(symbol);
            }
            Codebook::from_lengths(lengths)
        }
        other => Err(Error::Invariant(format!("unknown codebook layout {other}"))),
    }
}

/// Scale, codebook-table and coded-symbol bits of one quantized tensor.
pub fn tensor_payload_bits(qt: &QuantizedTensor) -> u64 {
    let scales = 64 * qt.scales.len() as u64;
    let coded = |p: &CodecPayload| scales + 8 * codebook_table_bytes(&p.codebook) as u64 + p.stream.bit_count;
    match &qt.codec_payload {
        Some(p) => coded(p),
        None => match CodecPayload::for_codes(&qt.codes, qt.bit_width) {
            Ok(p) => coded(&p),
            Err(_) => scales + qt.bit_width.bits() as u64 * qt.codes.len() as u64,
        },
    }
}

/// Serializes a quantized model into JSQQ bytes.
pub fn quantized_model_bytes(model: &QuantizedModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&QUANTIZED_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    put_u16(&mut out, model.tensors.len() as u16);
    let mut cells = BTreeMap::new();
    for t in &model.tensors {
        let payload = match &t.codec_payload {
            Some(p) => p.clone(),
            None => CodecPayload::for_codes(&t.codes, t.bit_width)?,
        };
        if let Some(c) = t.cell_index {
            cells.insert(t.name.clone(), c);
        }
        put_name_and_shape(&mut out, &t.name, &t.shape);
        out.push(t.bit_width.bits());
        put_u32(&mut out, t.bucket_size as u32);
        put_u32(&mut out, t.scales.len() as u32);
        for s in &t.scales {
            out.extend_from_slice(&s.mu.to_le_bytes());
            out.extend_from_slice(&s.nu.to_le_bytes());
        }
        put_codebook(&mut out, &payload.codebook);
        put_u64(&mut out, payload.stream.bit_count);
        out.extend_from_slice(&payload.stream.payload);
    }
    put_u16(&mut out, model.exempt_width.bits());
    put_u16(&mut out, model.exempt_tensors.len() as u16);
    for t in &model.exempt_tensors {
        put_tensor_record(&mut out, t, model.exempt_width);
    }
    let mut metadata = model.metadata.clone();
    if !cells.is_empty() {
        metadata.insert(CELL_TAGS_KEY.into(), serde_json::to_string(&cells)?);
    }
    put_metadata(&mut out, &metadata);
    Ok(out)
}

/// Parses JSQQ bytes, decoding every payload back into codes.
pub fn parse_quantized_model(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(QUANTIZED_MAGIC)?;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = r.u16("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, shape) = read_name_and_shape(&mut r)?;
        let bit_width = BitWidth::new(r.u8("bit width")?)?;
        let bucket_size = r.u32("bucket size")? as usize;
        let buckets = r.u32("bucket count")? as usize;
        let mut scales = Vec::with_capacity(buckets.min(1 << 20));
        for _ in 0..buckets {
            let mu = r.f32("scales")?;
            let nu = r.f32("scales")?;
            scales.push(ScaleParams { mu, nu });
        }
        let codebook = read_codebook(&mut r)?;
        let bit_count = r.u64("bit count")?;
        let len = usize::try_from(bit_count.div_ceil(8)).map_err(|_| Error::Truncated("payload"))?;
        let stream = EncodedStream {
            bit_count,
            payload: r.take(len, "payload")?.to_vec(),
        };
        let n: usize = shape.iter().product();
        let codes = decode(&stream, &codebook, n)?;
        let t = QuantizedTensor {
            name,
            shape,
            cell_index: None,
            bit_width,
            bucket_size,
            scales,
            codes,
            codec_payload: Some(CodecPayload { codebook, stream }),
        };
        t.validate()?;
        tensors.push(t);
    }
    let width = FloatWidth::try_from(r.u16("exempt float width")?)?;
    let exempt_count = r.u16("exempt tensor count")? as usize;
    let mut exempt = Vec::with_capacity(exempt_count);
    for _ in 0..exempt_count {
        exempt.push(read_tensor_record(&mut r, width)?);
    }
    let mut metadata = read_metadata(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Invariant("trailing bytes after metadata".into()));
    }
    if let Some(tags) = metadata.remove(CELL_TAGS_KEY) {
        let cells: BTreeMap<String, u16> = serde_json::from_str(&tags)?;
        for t in &mut tensors {
            t.cell_index = cells.get(&t.name).copied();
        }
    }
    let mut model = QuantizedModel {
        tensors,
        exempt_tensors: exempt,
        exempt_width: width,
        metadata,
        total_bits: 0,
    };
    model.total_bits = model.payload_bits();
    model.validate()?;
    Ok(model)
}

pub fn save_quantized_model<W: Write>(model: &QuantizedModel, mut sink: W) -> Result<usize> {
    let bytes = quantized_model_bytes(model)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len())
}

pub fn load_quantized_model<R: Read>(mut source: R) -> Result<QuantizedModel> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_quantized_model(&bytes)
}
