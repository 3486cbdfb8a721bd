//! `LCDM` binary matrix container.
//!
//! Layout (all integers little endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"LCDM"`                         |
//! | 4      | 1    | version, always 1                       |
//! | 5      | 1    | dtype: 0 = f32, 1 = u8, 2 = packed u64  |
//! | 6      | 2    | reserved, 0                             |
//! | 8      | 8    | rows                                    |
//! | 16     | 8    | cols (storage columns)                  |
//! | 24     | 8    | logical cols (bit count for dtype 2)    |
//! | 32     | ..   | row-major payload                       |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LCDM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
    PackedBits = 2,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            2 => Ok(Dtype::PackedBits),
            other => Err(Error::Format(format!("unknown dtype {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::PackedBits => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    Packed(Vec<u64>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::U8(_) => Dtype::U8,
            Payload::Packed(_) => Dtype::PackedBits,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::Packed(v) => v.len(),
        }
    }
}

/// One matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LcdmMatrix {
    pub rows: usize,
    pub cols: usize,
    pub logical_cols: usize,
    pub payload: Payload,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl LcdmMatrix {
    pub fn f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(rows, cols, cols, Payload::F32(data))
    }

    pub fn u8(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(rows, cols, cols, Payload::U8(data))
    }

    pub fn packed(rows: usize, bits: usize, words: Vec<u64>) -> Result<Self> {
        Self::new(rows, words_for(bits), bits, Payload::Packed(words))
    }

    pub fn new(rows: usize, cols: usize, logical_cols: usize, payload: Payload) -> Result<Self> {
        let m = LcdmMatrix {
            rows,
            cols,
            logical_cols,
            payload,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn dtype(&self) -> Dtype {
        self.payload.dtype()
    }

    fn validate(&self) -> Result<()> {
        let expected = self
            .rows
            .checked_mul(self.cols)
            .ok_or_else(|| Error::Format("rows*cols overflows".into()))?;
        if self.payload.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} entries, header says {}x{}",
                self.payload.len(),
                self.rows,
                self.cols
            )));
        }
        match &self.payload {
            Payload::Packed(words) => {
                if self.logical_cols == 0 || words_for(self.logical_cols) != self.cols {
                    return Err(Error::Format(format!(
                        "packed matrix with {} bits needs {} words per row, header says {}",
                        self.logical_cols,
                        words_for(self.logical_cols),
                        self.cols
                    )));
                }
                let tail = self.logical_cols % 64;
                if tail != 0 && self.cols > 0 {
                    let mask = !0u64 << tail;
                    for r in 0..self.rows {
                        if words[r * self.cols + self.cols - 1] & mask != 0 {
                            return Err(Error::Format(format!(
                                "row {r} has bits set beyond bit {}",
                                self.logical_cols
                            )));
                        }
                    }
                }
            }
            Payload::U8(v) => {
                if self.logical_cols != self.cols {
                    return Err(Error::Format(
                        "logical_cols must equal cols for dtype 1".into(),
                    ));
                }
                if let Some(bad) = v.iter().position(|&b| b > 1) {
                    return Err(Error::Format(format!(
                        "u8 entry {bad} is {}, expected 0 or 1",
                        v[bad]
                    )));
                }
            }
            Payload::F32(_) => {
                if self.logical_cols != self.cols {
                    return Err(Error::Format(
                        "logical_cols must equal cols for dtype 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = [0u8; HEADER_LEN];
        header[0..4].copy_from_slice(&MAGIC);
        header[4] = VERSION;
        header[5] = self.dtype() as u8;
        header[8..16].copy_from_slice(&(self.rows as u64).to_le_bytes());
        header[16..24].copy_from_slice(&(self.cols as u64).to_le_bytes());
        header[24..32].copy_from_slice(&(self.logical_cols as u64).to_le_bytes());
        w.write_all(&header)?;
        match &self.payload {
            Payload::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::U8(v) => w.write_all(v)?,
            Payload::Packed(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() * self.dtype().size());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one matrix from the stream; trailing data is left unread.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        read_exact_or_format(r, &mut header, "header")?;
        if header[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &header[0..4])));
        }
        if header[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", header[4])));
        }
        let dtype = Dtype::from_byte(header[5])?;
        if header[6] != 0 || header[7] != 0 {
            return Err(Error::Format("reserved bytes must be zero".into()));
        }
        let field = |at: usize| -> Result<usize> {
            let v = u64::from_le_bytes(header[at..at + 8].try_into().unwrap());
            usize::try_from(v).map_err(|_| Error::Format(format!("dimension {v} too large")))
        };
        let (rows, cols, logical_cols) = (field(8)?, field(16)?, field(24)?);
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("rows*cols overflows".into()))?;
        let nbytes = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let mut raw = Vec::new();
        r.take(nbytes as u64).read_to_end(&mut raw)?;
        if raw.len() != nbytes {
            return Err(Error::Format(format!(
                "truncated payload: expected {nbytes} bytes, found {}",
                raw.len()
            )));
        }
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(raw),
            Dtype::PackedBits => Payload::Packed(
                raw.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Self::new(rows, cols, logical_cols, payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let m = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}
