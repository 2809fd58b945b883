//! MOET binary tensor files.
//!
//! Layout (little-endian):
//! - magic `b"MOET"`
//! - version: u32 = 1
//! - dtype: u8 (1 = f32)
//! - ndim: u8
//! - dims: ndim * u64
//! - payload: row-major f32

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOET";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, &self.dims)?;
        write_f32s(&mut w, &self.data)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let dims = read_header(&mut r)?;
        let numel: usize = dims.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::format(format!("truncated payload: {e}")))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::format("trailing bytes after payload"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_header<W: Write>(w: &mut W, dims: &[usize]) -> Result<()> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::format(format!("too many dims: {}", dims.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("file too short for MOET header"))?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}")));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)?;
    let version = u32::from_le_bytes(u32_buf);
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    if b2[0] != DTYPE_F32 {
        return Err(Error::format(format!("unsupported dtype code {}", b2[0])));
    }
    let mut dims = Vec::with_capacity(b2[1] as usize);
    let mut u64_buf = [0u8; 8];
    for _ in 0..b2[1] {
        r.read_exact(&mut u64_buf)?;
        dims.push(u64::from_le_bytes(u64_buf) as usize);
    }
    Ok(dims)
}

/// Appends rows of a fixed shape; the leading dimension is patched on `finish`.
pub struct StreamWriter {
    file: BufWriter<File>,
    row_dims: Vec<usize>,
    row_len: usize,
    rows: usize,
}

impl StreamWriter {
    pub fn create(path: impl AsRef<Path>, row_dims: &[usize]) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        let mut dims = vec![0usize];
        dims.extend_from_slice(row_dims);
        write_header(&mut file, &dims)?;
        Ok(Self {
            file,
            row_dims: row_dims.to_vec(),
            row_len: row_dims.iter().product(),
            rows: 0,
        })
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.row_len {
            return Err(Error::shape(format!(
                "row of {} values for row shape {:?}",
                row.len(),
                self.row_dims
            )));
        }
        write_f32s(&mut self.file, row)?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<usize> {
        self.file.flush()?;
        let mut file = self.file.into_inner().map_err(|e| e.into_error())?;
        // magic(4) + version(4) + dtype(1) + ndim(1)
        file.seek(SeekFrom::Start(10))?;
        file.write_all(&(self.rows as u64).to_le_bytes())?;
        file.sync_data().ok();
        Ok(self.rows)
    }
}

/// Reads a MOET file one leading-dimension row at a time.
pub struct StreamReader {
    reader: BufReader<File>,
    dims: Vec<usize>,
    row_len: usize,
    remaining: usize,
    buf: Vec<u8>,
}

impl StreamReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let dims = read_header(&mut reader)?;
        if dims.is_empty() {
            return Err(Error::format("stream reader needs at least one dim"));
        }
        let row_len = dims[1..].iter().product();
        Ok(Self {
            reader,
            remaining: dims[0],
            dims,
            row_len,
            buf: vec![0u8; row_len * 4],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Fill `out` with the next row; returns false at end of file.
    pub fn next_row(&mut self, out: &mut Vec<f32>) -> Result<bool> {
        if self.remaining == 0 {
            return Ok(false);
        }
        self.reader
            .read_exact(&mut self.buf)
            .map_err(|e| Error::format(format!("truncated row: {e}")))?;
        out.clear();
        out.extend(
            self.buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        self.remaining -= 1;
        Ok(true)
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }
}
