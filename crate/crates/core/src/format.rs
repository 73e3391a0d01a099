//! The `.qgt` packed model container.
//!
//! ```text
//! header   magic "QGT1" | version u16 | tensor_count u16
//! record   name_len u16 | name utf-8 | rank u8 | dims u32 * rank
//!          | scheme u8 | bits u8 | granularity u8 | axis u8
//!          | (scale f32, offset f32) * channels | payload
//! ```
//!
//! Multi-byte fields are little-endian. Quantized payloads hold `bits`-bit
//! codes packed LSB-first, symmetric codes in two's complement, padded with
//! zero bits to a byte boundary per tensor. Unquantized tensors use scheme
//! 255 with the bits = 32 sentinel, no parameter block, and raw `f32`
//! payloads.

use crate::bytes::Reader;
use crate::quant::{code_range, dequantize, Granularity, QuantParams, QuantizedTensor, QuantizerSpec, Scheme};
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::HashSet;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"QGT1";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 8;
/// The bit-width recorded for tensors stored as raw `f32`.
pub const RAW_BITS: u8 = 32;
const RAW_SCHEME: u8 = 255;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("not a packed model: bad magic")]
    BadMagic,
    #[error("unsupported format version {0}; this build reads version {VERSION}")]
    UnsupportedVersion(u16),
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("unknown scheme tag {tag} in tensor `{tensor}`")]
    UnknownScheme { tensor: String, tag: u8 },
    #[error("tensor `{tensor}`: {detail}")]
    BadRecord { tensor: String, detail: String },
    #[error("tensor `{tensor}`: code {code} at index {index} is out of range for {bits}-bit {scheme}")]
    CodeOutOfRange {
        tensor: String,
        index: usize,
        code: i32,
        bits: u8,
        scheme: Scheme,
    },
    #[error("tensor `{0}`: nonzero padding bits")]
    NonzeroPadding(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("{0}")]
    TooLarge(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Codes(QuantizedTensor<f32>),
    Raw(Tensor<f32>),
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::Codes(q) => &q.shape,
            Payload::Raw(t) => t.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bits(&self) -> u8 {
        match self {
            Payload::Codes(q) => q.spec.bits(),
            Payload::Raw(_) => RAW_BITS,
        }
    }

    /// Values as the model sees them: dequantized codes or the raw tensor.
    pub fn values(&self) -> Tensor<f32> {
        match self {
            Payload::Codes(q) => dequantize(q),
            Payload::Raw(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedModel {
    pub records: Vec<Record>,
}

impl PackedModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_codes(&mut self, name: impl Into<String>, q: QuantizedTensor<f32>) {
        self.records.push(Record {
            name: name.into(),
            payload: Payload::Codes(q),
        });
    }

    pub fn push_raw(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.records.push(Record {
            name: name.into(),
            payload: Payload::Raw(t),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.payload)
    }

    pub fn element_count(&self) -> usize {
        self.records.iter().map(|r| r.payload.len()).sum()
    }
}

fn scheme_tag(s: Scheme) -> u8 {
    match s {
        Scheme::Asymmetric => 0,
        Scheme::Symmetric => 1,
        Scheme::Pow2 => 2,
    }
}

fn payload_bytes(elements: usize, bits: u8) -> usize {
    (elements * bits as usize).div_ceil(8)
}

fn record_header_bytes(name: &str, rank: usize) -> usize {
    2 + name.len() + 1 + 4 * rank + 4
}

/// Channel count the parameter block must cover.
fn param_channels(shape: &[usize], axis: Option<usize>) -> usize {
    axis.map_or(1, |a| shape[a])
}

pub fn pack(model: &PackedModel) -> Result<Vec<u8>, FormatError> {
    let count = u16::try_from(model.records.len())
        .map_err(|_| FormatError::TooLarge(format!("{} tensors exceed the u16 count", model.records.len())))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(size_report(model).packed_bytes);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for rec in &model.records {
        let bad = |detail: String| FormatError::BadRecord {
            tensor: rec.name.clone(),
            detail,
        };
        if !seen.insert(rec.name.as_str()) {
            return Err(bad("duplicate tensor name".into()));
        }
        let name_len = u16::try_from(rec.name.len()).map_err(|_| bad("name longer than 65535 bytes".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        let shape = rec.payload.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| bad("rank exceeds 255".into()))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| bad(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &rec.payload {
            Payload::Raw(t) => {
                out.extend_from_slice(&[RAW_SCHEME, RAW_BITS, 0, 0]);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Codes(q) => pack_codes(&mut out, rec, q)?,
        }
    }
    Ok(out)
}

fn pack_codes(out: &mut Vec<u8>, rec: &Record, q: &QuantizedTensor<f32>) -> Result<(), FormatError> {
    let bad = |detail: String| FormatError::BadRecord {
        tensor: rec.name.clone(),
        detail,
    };
    let spec = q.spec;
    let axis = spec.granularity().resolve_axis(q.shape.len()).map_err(|e| bad(e.to_string()))?;
    if axis != q.params.axis {
        return Err(bad("parameter axis disagrees with the spec".into()));
    }
    let channels = param_channels(&q.shape, axis);
    if q.params.scales.len() != channels || q.params.offsets.len() != channels {
        return Err(bad(format!("{channels} channel(s) but {} parameter pair(s)", q.params.scales.len())));
    }
    let n: usize = q.shape.iter().product();
    if q.codes.len() != n {
        return Err(bad(format!("{} codes for {n} elements", q.codes.len())));
    }
    let axis_byte = match axis {
        None => 0,
        Some(a) => u8::try_from(a).map_err(|_| bad("axis exceeds 255".into()))?,
    };
    out.extend_from_slice(&[scheme_tag(spec.scheme()), spec.bits(), u8::from(axis.is_some()), axis_byte]);
    for (s, o) in q.params.scales.iter().zip(&q.params.offsets) {
        out.extend_from_slice(&s.to_le_bytes());
        out.extend_from_slice(&o.to_le_bytes());
    }
    let (lo, hi) = spec.code_range();
    let bits = spec.bits() as u32;
    let mask = (1u32 << bits) - 1;
    let mut acc = 0u32;
    let mut filled = 0u32;
    for (index, &code) in q.codes.iter().enumerate() {
        if code < lo || code > hi {
            return Err(FormatError::CodeOutOfRange {
                tensor: rec.name.clone(),
                index,
                code,
                bits: spec.bits(),
                scheme: spec.scheme(),
            });
        }
        acc |= ((code as u32) & mask) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(())
}

pub fn unpack(bytes: &[u8]) -> Result<PackedModel, FormatError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4).ok_or(FormatError::Truncated(0))?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u16().ok_or(FormatError::Truncated(r.position()))?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u16().ok_or(FormatError::Truncated(r.position()))?;
    let mut model = PackedModel::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let rec = read_record(&mut r)?;
        if !seen.insert(rec.name.clone()) {
            return Err(FormatError::BadRecord {
                tensor: rec.name,
                detail: "duplicate tensor name".into(),
            });
        }
        model.records.push(rec);
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()));
    }
    Ok(model)
}

fn read_record(r: &mut Reader<'_>) -> Result<Record, FormatError> {
    macro_rules! need {
        ($e:expr) => {{
            let at = r.position();
            $e.ok_or(FormatError::Truncated(at))?
        }};
    }
    let name_len = need!(r.u16()) as usize;
    let name_bytes = need!(r.take(name_len));
    let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| FormatError::BadRecord {
        tensor: String::from_utf8_lossy(name_bytes).into_owned(),
        detail: "name is not valid UTF-8".into(),
    })?;
    let bad = |detail: String| FormatError::BadRecord {
        tensor: name.clone(),
        detail,
    };
    let rank = need!(r.u8()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(need!(r.u32()) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("element count overflows".into()))?;
    let scheme = need!(r.u8());
    let bits = need!(r.u8());
    let gran = need!(r.u8());
    let axis_byte = need!(r.u8());
    if scheme == RAW_SCHEME {
        if bits != RAW_BITS || gran != 0 || axis_byte != 0 {
            return Err(bad(format!("raw tensor with bits {bits}, granularity {gran}, axis {axis_byte}")));
        }
        let len = n.checked_mul(4).ok_or_else(|| bad("payload size overflows".into()))?;
        let raw = need!(r.take(len));
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        return Ok(Record {
            name,
            payload: Payload::Raw(t),
        });
    }
    let scheme = match scheme {
        0 => Scheme::Asymmetric,
        1 => Scheme::Symmetric,
        2 => Scheme::Pow2,
        tag => return Err(FormatError::UnknownScheme { tensor: name, tag }),
    };
    let granularity = match gran {
        0 if axis_byte == 0 => Granularity::PerTensor,
        1 if (axis_byte as usize) < rank => Granularity::PerChannel {
            axis: axis_byte as isize,
        },
        _ => return Err(bad(format!("bad granularity {gran} with axis {axis_byte} for rank {rank}"))),
    };
    let spec = QuantizerSpec::new(scheme, bits, granularity).map_err(|e| bad(e.to_string()))?;
    let axis = (gran == 1).then_some(axis_byte as usize);
    let channels = param_channels(&shape, axis);
    let mut scales = Vec::with_capacity(channels);
    let mut offsets = Vec::with_capacity(channels);
    for _ in 0..channels {
        let s = need!(r.f32());
        let o = need!(r.f32());
        if !(s.is_finite() && s > 0.0 && o.is_finite()) {
            return Err(bad(format!("invalid scale/offset pair ({s}, {o})")));
        }
        scales.push(s);
        offsets.push(o);
    }
    let payload = need!(r.take(payload_bytes(n, bits)));
    let codes = unpack_codes(payload, n, spec, &name)?;
    Ok(Record {
        name,
        payload: Payload::Codes(QuantizedTensor {
            shape,
            codes,
            params: QuantParams { scales, offsets, axis },
            spec,
        }),
    })
}

fn unpack_codes(payload: &[u8], n: usize, spec: QuantizerSpec, name: &str) -> Result<Vec<i32>, FormatError> {
    let bits = spec.bits() as u32;
    let mask = (1u32 << bits) - 1;
    let signed = spec.scheme() != Scheme::Asymmetric;
    let (lo, hi) = code_range(spec.scheme(), spec.bits());
    let mut codes = Vec::with_capacity(n);
    let mut acc = 0u32;
    let mut filled = 0u32;
    let mut bytes = payload.iter();
    for index in 0..n {
        while filled < bits {
            acc |= (*bytes.next().expect("payload length checked") as u32) << filled;
            filled += 8;
        }
        let raw = acc & mask;
        acc >>= bits;
        filled -= bits;
        let code = if signed && raw >> (bits - 1) == 1 {
            raw as i32 - (1i32 << bits)
        } else {
            raw as i32
        };
        if code < lo || code > hi {
            return Err(FormatError::CodeOutOfRange {
                tensor: name.to_string(),
                index,
                code,
                bits: spec.bits(),
                scheme: spec.scheme(),
            });
        }
        codes.push(code);
    }
    if acc != 0 {
        return Err(FormatError::NonzeroPadding(name.to_string()));
    }
    Ok(codes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSize {
    pub name: String,
    pub elements: usize,
    pub bits: u8,
    /// Number of (scale, offset) pairs stored.
    pub param_pairs: usize,
    pub header_bytes: usize,
    pub param_bytes: usize,
    pub payload_bytes: usize,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    /// Exact length of the packed byte stream.
    pub packed_bytes: usize,
    /// Four bytes per element of the FP32 baseline.
    pub fp32_bytes: usize,
    /// `fp32_bytes / packed_bytes`.
    pub compression_ratio: f64,
    /// Sum of the code and raw payloads, without headers or parameters.
    pub payload_bytes: usize,
    pub param_bytes: usize,
    /// `fp32_bytes / payload_bytes`.
    pub payload_ratio: f64,
    pub tensors: Vec<TensorSize>,
}

/// Byte accounting of `pack(model)` against an FP32 copy of the same
/// tensors.
pub fn size_report(model: &PackedModel) -> SizeReport {
    size_report_against(model, 4 * model.element_count())
}

/// As [`size_report`], with an explicit FP32 baseline size, for baselines
/// that hold more tensors than the packed model (an unfolded checkpoint, for
/// instance).
pub fn size_report_against(model: &PackedModel, fp32_bytes: usize) -> SizeReport {
    let tensors: Vec<TensorSize> = model
        .records
        .iter()
        .map(|rec| {
            let elements = rec.payload.len();
            let bits = rec.payload.bits();
            let param_pairs = match &rec.payload {
                Payload::Codes(q) => q.params.scales.len(),
                Payload::Raw(_) => 0,
            };
            let header_bytes = record_header_bytes(&rec.name, rec.payload.shape().len());
            let param_bytes = 8 * param_pairs;
            let payload_bytes = payload_bytes(elements, bits);
            TensorSize {
                name: rec.name.clone(),
                elements,
                bits,
                param_pairs,
                header_bytes,
                param_bytes,
                payload_bytes,
                total_bytes: header_bytes + param_bytes + payload_bytes,
            }
        })
        .collect();
    let packed_bytes = HEADER_BYTES + tensors.iter().map(|t| t.total_bytes).sum::<usize>();
    let payload_bytes: usize = tensors.iter().map(|t| t.payload_bytes).sum();
    let param_bytes = tensors.iter().map(|t| t.param_bytes).sum();
    let ratio = |den: usize| if den == 0 { f64::NAN } else { fp32_bytes as f64 / den as f64 };
    SizeReport {
        packed_bytes,
        fp32_bytes,
        compression_ratio: ratio(packed_bytes),
        payload_bytes,
        param_bytes,
        payload_ratio: ratio(payload_bytes),
        tensors,
    }
}
