//! Named-tensor container file format "HVT1".
//!
//! Layout: magic bytes `HVT1`, entry count (u32 LE), then per entry:
//! name length (u16 LE), UTF-8 name, rank (u8), extents (u32 LE each),
//! payload (f64 LE, row-major).

use crate::tensor::TensorData;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"HVT1";

#[derive(Debug, Error)]
pub enum HvtError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed container: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: no entry named {name}")]
    MissingEntry { path: PathBuf, name: String },
}

pub type Result<T> = std::result::Result<T, HvtError>;

fn io_err(path: &Path, source: io::Error) -> HvtError {
    HvtError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize entries in the order given.
pub fn write_entries<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a TensorData)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |buf: &[u8]| w.write_all(buf).map_err(|e| io_err(path, e));
    emit(&MAGIC)?;
    emit(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        emit(&(name_bytes.len() as u16).to_le_bytes())?;
        emit(name_bytes)?;
        emit(&[tensor.rank() as u8])?;
        for &e in tensor.shape() {
            emit(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            emit(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| io_err(path, e))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, path)?;
    if magic != MAGIC {
        return Err(HvtError::Format {
            path: path.to_path_buf(),
            reason: format!("bad magic {:?}", magic),
        });
    }
    read_u32(r, path)
}

fn read_entry_meta<R: Read>(r: &mut R, path: &Path) -> Result<(String, Vec<usize>)> {
    let mut b2 = [0u8; 2];
    read_exact_at(r, &mut b2, path)?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name = vec![0u8; name_len];
    read_exact_at(r, &mut name, path)?;
    let name = String::from_utf8(name).map_err(|e| HvtError::Format {
        path: path.to_path_buf(),
        reason: format!("entry name not UTF-8: {}", e),
    })?;
    let mut rank = [0u8; 1];
    read_exact_at(r, &mut rank, path)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(r, path)? as usize);
    }
    Ok((name, shape))
}

fn read_payload<R: Read>(r: &mut R, numel: usize, path: &Path) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; numel * 8];
    read_exact_at(r, &mut raw, path)?;
    let mut data = Vec::with_capacity(numel);
    for c in raw.chunks_exact(8) {
        data.push(f64::from_le_bytes(c.try_into().unwrap()));
    }
    Ok(data)
}

/// Read the whole container, preserving file order.
pub fn read_entries(path: &Path) -> Result<Vec<(String, TensorData)>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let count = read_header(&mut r, path)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (name, shape) = read_entry_meta(&mut r, path)?;
        let numel: usize = shape.iter().product();
        let data = read_payload(&mut r, numel, path)?;
        let tensor = TensorData::new(shape, data).map_err(|e| HvtError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Lazy reader: indexes entry offsets once, reads payloads on demand.
pub struct HvtReader {
    path: PathBuf,
    file: File,
    index: BTreeMap<String, (Vec<usize>, u64)>,
}

impl HvtReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let count = read_header(&mut r, path)?;
        let mut index = BTreeMap::new();
        for _ in 0..count {
            let (name, shape) = read_entry_meta(&mut r, path)?;
            let numel: usize = shape.iter().product();
            let offset = r.stream_position().map_err(|e| io_err(path, e))?;
            r.seek(SeekFrom::Current(numel as i64 * 8))
                .map_err(|e| io_err(path, e))?;
            index.insert(name, (shape, offset));
        }
        let file = r.into_inner();
        Ok(HvtReader {
            path: path.to_path_buf(),
            file,
            index,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn read(&mut self, name: &str) -> Result<TensorData> {
        let (shape, offset) = self
            .index
            .get(name)
            .cloned()
            .ok_or_else(|| HvtError::MissingEntry {
                path: self.path.clone(),
                name: name.to_string(),
            })?;
        self.file
            .seek(SeekFrom::Start(offset))
            .map_err(|e| io_err(&self.path, e))?;
        let numel: usize = shape.iter().product();
        let data = read_payload(&mut self.file, numel, &self.path)?;
        TensorData::new(shape, data).map_err(|e| HvtError::Format {
            path: self.path.clone(),
            reason: e.to_string(),
        })
    }
}
