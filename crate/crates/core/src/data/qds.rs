//! The `.qds` dataset file:
//!
//! ```text
//! magic "QDS1" | sample_count u32 | rank u8 | dims u32 * rank | class_count u16
//! | features f32 * (sample_count * prod(dims)) | labels u16 * sample_count
//! ```
//!
//! All multi-byte fields are little-endian.

use super::{DataError, Dataset};
use crate::bytes::Reader;
use std::path::Path;

pub const QDS_MAGIC: [u8; 4] = *b"QDS1";

pub fn write_qds(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let count = u32::try_from(ds.len()).map_err(|_| DataError::Invalid("too many samples for u32".into()))?;
    let rank = u8::try_from(ds.sample_shape().len()).map_err(|_| DataError::Invalid("sample rank exceeds 255".into()))?;
    let classes =
        u16::try_from(ds.classes()).map_err(|_| DataError::Invalid("class count exceeds u16".into()))?;
    let mut out = Vec::with_capacity(16 + ds.features().len() * 4 + ds.len() * 2);
    out.extend_from_slice(&QDS_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.push(rank);
    for &d in ds.sample_shape() {
        let d = u32::try_from(d).map_err(|_| DataError::Invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&classes.to_le_bytes());
    for v in ds.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in ds.labels() {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn read_qds(bytes: &[u8]) -> Result<Dataset, DataError> {
    let truncated = || DataError::Format("file is truncated".into());
    let mut r = Reader::new(bytes);
    if r.take(4).ok_or_else(truncated)? != QDS_MAGIC {
        return Err(DataError::Format("bad magic, expected QDS1".into()));
    }
    let count = r.u32().ok_or_else(truncated)? as usize;
    let rank = r.u8().ok_or_else(truncated)? as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize).ok_or_else(truncated))
        .collect::<Result<Vec<_>, _>>()?;
    let classes = r.u16().ok_or_else(truncated)? as usize;
    let width = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| DataError::Format("sample shape overflows".into()))?;
    let values = width
        .checked_mul(count)
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(truncated)?;
    let features = (0..values).map(|_| r.f32().expect("length checked")).collect();
    let labels = (0..count)
        .map(|_| r.u16().map(usize::from).ok_or_else(truncated))
        .collect::<Result<Vec<_>, _>>()?;
    if r.remaining() != 0 {
        return Err(DataError::Format(format!("{} trailing bytes", r.remaining())));
    }
    Dataset::new(shape, features, labels, classes).map_err(|e| DataError::Format(e.to_string()))
}

pub fn write_qds_file(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let bytes = write_qds(ds)?;
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_qds_file(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_qds(&bytes)
}
