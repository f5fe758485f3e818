//! Binary matrix files: `NTSF`, u32 version, u64 rows, u64 cols, then
//! little-endian f32 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graphprep::{FeatureMatrix, Modality};

pub const MATRIX_MAGIC: &[u8; 4] = b"NTSF";
pub const MATRIX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

pub fn encode_matrix(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(data.len(), rows * cols, "matrix payload length");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize, path: &Path) -> Result<Vec<f32>> {
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::format(path, format!("{count} values overflow")))?;
    let mut raw = Vec::new();
    // take() bounds the allocation by what the file actually holds
    r.take(bytes as u64).read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != bytes {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("payload truncated: {} of {bytes} bytes", raw.len()),
            ),
        ));
    }
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Reads a matrix, returning `(rows, cols, values)` with bits untouched.
pub fn read_raw<R: Read>(r: &mut R, path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut head = [0u8; HEADER_LEN];
    read_exact_or(r, &mut head, path)?;
    if &head[..4] != MATRIX_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(head[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::format(path, format!("{rows}x{cols} is too large")))?;
    let data = read_f32s(r, count, path)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok((rows as usize, cols as usize, data))
}

pub fn write_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    write_raw(path, m.n, m.d, &m.data)
}

pub fn write_raw(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_matrix(rows, cols, data)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path, modality: Modality) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (n, d, data) = read_raw(&mut BufReader::new(file), path)?;
    FeatureMatrix::new(n, d, modality, data)
}
