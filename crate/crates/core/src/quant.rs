//! Weight quantizers: the quantizer `Q`, its dequantizer `D`, the projection
//! `D∘Q`, and the squared quantization-error loss `||D(Q(w)) - w||²`.
//!
//! Parameters are always fitted from the tensor being quantized. The fitted
//! scale is settled to a fixed point of the refit map, which makes `D∘Q`
//! exactly idempotent under refitting rather than merely idempotent up to a
//! few ulps.

use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("unsupported bit width {0}; expected {MIN_BITS}..={MAX_BITS}")]
    InvalidBits(u8),
    #[error("channel axis {axis} is out of range for a rank-{rank} tensor")]
    AxisOutOfRange { axis: isize, rank: usize },
    #[error("quantization parameters cover {actual} channel(s) but the tensor has {expected}")]
    ParamsMismatch { expected: usize, actual: usize },
    #[error("quantization parameters must have finite positive scales")]
    BadScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Affine map `code * scale + offset`, codes in `[0, 2^b - 1]`.
    Asymmetric,
    /// Zero offset, codes symmetric about zero.
    Symmetric,
    /// Symmetric with a power-of-two scale.
    Pow2,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Asymmetric => "asymmetric",
            Scheme::Symmetric => "symmetric",
            Scheme::Pow2 => "pow2",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asymmetric" => Ok(Scheme::Asymmetric),
            "symmetric" => Ok(Scheme::Symmetric),
            "pow2" => Ok(Scheme::Pow2),
            other => Err(format!("unknown quantization scheme `{other}`")),
        }
    }
}

/// One parameter pair per tensor, or one per slice along `axis`.
///
/// Negative axes count from the end, so `-1` is the output-channel axis of
/// both `[in, out]` dense kernels and `[kh, kw, cin, cout]` conv kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: isize },
}

impl Granularity {
    pub const fn per_channel() -> Self {
        Granularity::PerChannel { axis: -1 }
    }

    /// Resolves the channel axis against a concrete rank.
    pub fn resolve_axis(self, rank: usize) -> Result<Option<usize>, QuantError> {
        match self {
            Granularity::PerTensor => Ok(None),
            Granularity::PerChannel { axis } => {
                let resolved = if axis < 0 { rank as isize + axis } else { axis };
                if resolved < 0 || resolved >= rank as isize {
                    Err(QuantError::AxisOutOfRange { axis, rank })
                } else {
                    Ok(Some(resolved as usize))
                }
            }
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerTensor => f.write_str("per_tensor"),
            Granularity::PerChannel { axis } => write!(f, "per_channel(axis={axis})"),
        }
    }
}

/// Scheme, bit-width and granularity of one quantizer.
///
/// Serialized flat, e.g. `{ scheme = "asymmetric", bits = 2, granularity =
/// "per_channel", axis = -1 }`; `granularity` defaults to per-tensor and
/// `axis` to `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct QuantizerSpec {
    scheme: Scheme,
    bits: u8,
    granularity: Granularity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum GranularityName {
    PerTensor,
    PerChannel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    scheme: Scheme,
    bits: u8,
    #[serde(default = "per_tensor_name")]
    granularity: GranularityName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<isize>,
}

fn per_tensor_name() -> GranularityName {
    GranularityName::PerTensor
}

impl TryFrom<RawSpec> for QuantizerSpec {
    type Error = QuantError;

    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        let granularity = match raw.granularity {
            GranularityName::PerTensor => Granularity::PerTensor,
            GranularityName::PerChannel => Granularity::PerChannel {
                axis: raw.axis.unwrap_or(-1),
            },
        };
        QuantizerSpec::new(raw.scheme, raw.bits, granularity)
    }
}

impl From<QuantizerSpec> for RawSpec {
    fn from(spec: QuantizerSpec) -> Self {
        let (granularity, axis) = match spec.granularity {
            Granularity::PerTensor => (GranularityName::PerTensor, None),
            Granularity::PerChannel { axis } => (GranularityName::PerChannel, Some(axis)),
        };
        RawSpec {
            scheme: spec.scheme,
            bits: spec.bits,
            granularity,
            axis,
        }
    }
}

impl QuantizerSpec {
    pub fn new(scheme: Scheme, bits: u8, granularity: Granularity) -> Result<Self, QuantError> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(QuantError::InvalidBits(bits));
        }
        Ok(Self {
            scheme,
            bits,
            granularity,
        })
    }

    pub fn asymmetric(bits: u8) -> Result<Self, QuantError> {
        Self::new(Scheme::Asymmetric, bits, Granularity::PerTensor)
    }

    pub fn with_granularity(self, granularity: Granularity) -> Self {
        Self {
            granularity,
            ..self
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Inclusive code range for this scheme and bit width.
    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.scheme, self.bits)
    }

    /// Number of representable values per channel.
    pub fn levels(&self) -> usize {
        let (lo, hi) = self.code_range();
        (hi - lo + 1) as usize
    }
}

impl fmt::Display for QuantizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}-bit {}", self.scheme, self.bits, self.granularity)
    }
}

pub fn code_range(scheme: Scheme, bits: u8) -> (i32, i32) {
    match scheme {
        Scheme::Asymmetric => (0, (1i32 << bits) - 1),
        Scheme::Symmetric | Scheme::Pow2 => {
            let top = (1i32 << (bits - 1)) - 1;
            (-top, top)
        }
    }
}

/// Fitted scale and offset, one entry per channel (a single entry per tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams<T> {
    pub scales: Vec<T>,
    pub offsets: Vec<T>,
    /// Resolved channel axis, `None` for per-tensor parameters.
    pub axis: Option<usize>,
}

impl<T: Real> QuantParams<T> {
    pub fn channels(&self) -> usize {
        self.scales.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
    pub params: QuantParams<T>,
    pub spec: QuantizerSpec,
}

/// Maps flat element indices to channel indices.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChannelLayout {
    pub channels: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn new(shape: &[usize], axis: Option<usize>) -> Self {
        match axis {
            None => Self {
                channels: 1,
                inner: 1,
            },
            Some(a) => Self {
                channels: shape[a],
                inner: shape[a + 1..].iter().product(),
            },
        }
    }

    #[inline]
    pub fn channel_of(&self, index: usize) -> usize {
        if self.channels == 1 {
            0
        } else {
            (index / self.inner) % self.channels
        }
    }
}

pub fn fit_params<T: Real>(w: &Tensor<T>, spec: &QuantizerSpec) -> Result<QuantParams<T>, QuantError> {
    let axis = spec.granularity.resolve_axis(w.rank())?;
    let layout = ChannelLayout::new(w.shape(), axis);
    let mut lo = vec![T::infinity(); layout.channels];
    let mut hi = vec![T::neg_infinity(); layout.channels];
    for (i, &x) in w.data().iter().enumerate() {
        let c = layout.channel_of(i);
        if x < lo[c] {
            lo[c] = x;
        }
        if x > hi[c] {
            hi[c] = x;
        }
    }
    let (code_lo, code_hi) = spec.code_range();
    let mut scales = Vec::with_capacity(layout.channels);
    let mut offsets = Vec::with_capacity(layout.channels);
    for (&min, &max) in lo.iter().zip(&hi) {
        let (scale, offset) = match spec.scheme {
            Scheme::Asymmetric => fit_affine(min, max, T::of((code_hi - code_lo) as f64)),
            Scheme::Symmetric => fit_symmetric(min.abs().max(max.abs()), T::of(code_hi as f64)),
            Scheme::Pow2 => fit_pow2(min.abs().max(max.abs()), T::of(code_hi as f64)),
        };
        scales.push(scale);
        offsets.push(offset);
    }
    Ok(QuantParams {
        scales,
        offsets,
        axis,
    })
}

fn fit_affine<T: Real>(min: T, max: T, steps: T) -> (T, T) {
    if !(max > min) {
        return (T::one(), min);
    }
    let start = (max - min) / steps;
    let scale = settle(start, |s| ((steps * s + min) - min) / steps);
    if scale.is_finite() && scale > T::zero() {
        (scale, min)
    } else {
        (T::one(), min)
    }
}

fn fit_symmetric<T: Real>(max_abs: T, top: T) -> (T, T) {
    if !(max_abs > T::zero()) {
        return (T::one(), T::zero());
    }
    let scale = settle(max_abs / top, |s| (top * s) / top);
    if scale.is_finite() && scale > T::zero() {
        (scale, T::zero())
    } else {
        (T::one(), T::zero())
    }
}

fn fit_pow2<T: Real>(max_abs: T, top: T) -> (T, T) {
    if !(max_abs > T::zero()) {
        return (T::one(), T::zero());
    }
    let scale = ceil_pow2(max_abs / top);
    if scale.is_finite() && scale > T::zero() {
        (scale, T::zero())
    } else {
        (T::one(), T::zero())
    }
}

/// Smallest power of two not below `x` (for finite positive `x`).
///
/// Rounding up keeps every weight inside the code range, so a refit on the
/// dequantized tensor lands on the same exponent.
pub(crate) fn ceil_pow2<T: Real>(x: T) -> T {
    if !(x.is_finite() && x > T::zero()) {
        return T::one();
    }
    let two = T::of(2.0);
    let mut p = two.powi(x.log2().floor().to_i32().unwrap_or(0));
    while p < x {
        p *= two;
    }
    while p / two >= x && p / two > T::zero() {
        p /= two;
    }
    p
}

/// Iterates the refit map until it reaches a fixed point or a cycle, and
/// returns the smallest member of the cycle reached. Any scale on the same
/// orbit therefore settles to the same value.
fn settle<T: Real>(start: T, refit: impl Fn(T) -> T) -> T {
    let mut seen: Vec<T> = vec![start];
    let mut s = start;
    for _ in 0..64 {
        let next = refit(s);
        if let Some(pos) = seen.iter().position(|&v| v == next) {
            return seen[pos..]
                .iter()
                .copied()
                .fold(T::infinity(), |a, b| if b < a { b } else { a });
        }
        seen.push(next);
        s = next;
    }
    s
}

/// The quantizer `Q`: `clamp(round((w - offset) / scale))`, rounding half
/// away from zero.
pub fn quantize<T: Real>(
    w: &Tensor<T>,
    params: &QuantParams<T>,
    spec: &QuantizerSpec,
) -> Result<QuantizedTensor<T>, QuantError> {
    let axis = spec.granularity.resolve_axis(w.rank())?;
    let layout = ChannelLayout::new(w.shape(), axis);
    check_params(params, layout.channels)?;
    let (lo, hi) = spec.code_range();
    let (lo_t, hi_t) = (T::of(lo as f64), T::of(hi as f64));
    let codes = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = layout.channel_of(i);
            let q = ((x - params.offsets[c]) / params.scales[c]).round();
            let q = if q.is_nan() { T::zero() } else { q.max(lo_t).min(hi_t) };
            q.to_i32().unwrap_or(0)
        })
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        codes,
        params: QuantParams {
            axis,
            ..params.clone()
        },
        spec: *spec,
    })
}

fn check_params<T: Real>(params: &QuantParams<T>, channels: usize) -> Result<(), QuantError> {
    if params.scales.len() != channels || params.offsets.len() != channels {
        return Err(QuantError::ParamsMismatch {
            expected: channels,
            actual: params.scales.len(),
        });
    }
    if params.scales.iter().any(|s| !(s.is_finite() && *s > T::zero())) {
        return Err(QuantError::BadScale);
    }
    Ok(())
}

/// The dequantizer `D`: `code * scale + offset`.
pub fn dequantize<T: Real>(q: &QuantizedTensor<T>) -> Tensor<T> {
    let layout = ChannelLayout::new(&q.shape, q.params.axis);
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = layout.channel_of(i);
            T::of(code as f64) * q.params.scales[c] + q.params.offsets[c]
        })
        .collect();
    Tensor::new(q.shape.clone(), data).expect("codes match their shape")
}

/// The projection `D∘Q`, fitting parameters from `w`.
pub fn roundtrip<T: Real>(w: &Tensor<T>, spec: &QuantizerSpec) -> Result<Tensor<T>, QuantError> {
    let params = fit_params(w, spec)?;
    Ok(dequantize(&quantize(w, &params, spec)?))
}

/// Fits, quantizes, and returns the codes together with their parameters.
pub fn quantize_fitted<T: Real>(
    w: &Tensor<T>,
    spec: &QuantizerSpec,
) -> Result<QuantizedTensor<T>, QuantError> {
    let params = fit_params(w, spec)?;
    quantize(w, &params, spec)
}

/// `(D∘Q - I) w`: the displacement that projects `w` onto its grid.
pub fn quant_residual<T: Real>(w: &Tensor<T>, spec: &QuantizerSpec) -> Result<Tensor<T>, QuantError> {
    let mut r = roundtrip(w, spec)?;
    for (rq, &x) in r.data_mut().iter_mut().zip(w.data()) {
        *rq -= x;
    }
    Ok(r)
}

/// Squared distance from `w` to its own quantization grid, `||D(Q(w)) - w||²`.
pub fn quant_error_loss<T: Real>(w: &Tensor<T>, spec: &QuantizerSpec) -> Result<T, QuantError> {
    let wq = roundtrip(w, spec)?;
    Ok(T::of(squared_distance(wq.data(), w.data())))
}

pub(crate) fn squared_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum()
}

/// Gradient of the quantization-error loss with the projection held fixed:
/// `2 (w - D(Q(w)))`.
pub fn quant_error_grad<T: Real>(w: &Tensor<T>, spec: &QuantizerSpec) -> Result<Tensor<T>, QuantError> {
    let wq = roundtrip(w, spec)?;
    Ok(error_grad_from(w, &wq))
}

pub(crate) fn error_grad_from<T: Real>(w: &Tensor<T>, wq: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    let data = w
        .data()
        .iter()
        .zip(wq.data())
        .map(|(&x, &q)| two * (x - q))
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape as w")
}
