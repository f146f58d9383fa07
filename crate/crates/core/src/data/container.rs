//! Named-array container used for feature sidecars and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    9 bytes  "VIGT-ARR\0"
//! version  u8       currently 1
//! count    u32      number of entries
//! entry    u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!          u8 rank, rank × u64 dims                      (repeated `count` times)
//! payload  the values of each entry, row-major, in entry order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, VigtError};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 9] = b"VIGT-ARR\0";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    /// Stores a tensor at its own precision.
    pub fn from_tensor<E: Scalar>(name: impl Into<String>, t: &Tensor<E>) -> Self {
        let data = match E::PRECISION {
            crate::tensor::Precision::F32 => {
                ArrayData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect())
            }
            crate::tensor::Precision::F64 => {
                ArrayData::F64(t.data().iter().map(|x| x.as_f64()).collect())
            }
        };
        Self {
            name: name.into(),
            dims: t.shape().to_vec(),
            data,
        }
    }

    /// Converts to a tensor of element type `E`. Same-precision reads are
    /// exact.
    pub fn to_tensor<E: Scalar>(&self) -> Result<Tensor<E>> {
        let values: Vec<E> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| E::from_f64_lossy(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| E::from_f64_lossy(x)).collect(),
        };
        Tensor::new(self.dims.clone(), values)
    }

    pub fn values_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    pub entries: Vec<NamedArray>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: NamedArray) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u8(VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (i, e) in self.entries.iter().enumerate() {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
                return Err(VigtError::format(i, "entry name or rank too large"));
            }
            if e.dims.iter().product::<usize>() != e.data.len() {
                return Err(VigtError::format(i, "dims do not match payload length"));
            }
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name)?;
            w.write_u8(e.data.dtype())?;
            w.write_u8(e.dims.len() as u8)?;
            for &d in &e.dims {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
        }
        for e in &self.entries {
            match &e.data {
                ArrayData::F32(v) => {
                    for &x in v {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                }
                ArrayData::F64(v) => {
                    for &x in v {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header_err = |m: &str| VigtError::format(0, format!("header: {m}"));
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)
            .map_err(|_| header_err("truncated magic"))?;
        if &magic != MAGIC {
            return Err(header_err("bad magic"));
        }
        let version = r.read_u8().map_err(|_| header_err("missing version"))?;
        if version != VERSION {
            return Err(header_err(&format!("unsupported version {version}")));
        }
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|_| header_err("missing entry count"))? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let trunc = |_| VigtError::format(i, "truncated entry table");
            let len = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(trunc)?;
            let name =
                String::from_utf8(name).map_err(|_| VigtError::format(i, "name is not UTF-8"))?;
            let dtype = r.read_u8().map_err(trunc)?;
            if dtype > 1 {
                return Err(VigtError::format(i, format!("unknown dtype {dtype}")));
            }
            let rank = r.read_u8().map_err(trunc)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u64::<LittleEndian>().map_err(trunc)? as usize);
            }
            table.push((name, dtype, dims));
        }
        let mut entries = Vec::with_capacity(table.len());
        for (i, (name, dtype, dims)) in table.into_iter().enumerate() {
            let n: usize = dims.iter().product();
            let trunc = |_| VigtError::format(i, "truncated payload");
            let data = if dtype == 0 {
                let mut v = vec![0f32; n];
                r.read_f32_into::<LittleEndian>(&mut v).map_err(trunc)?;
                ArrayData::F32(v)
            } else {
                let mut v = vec![0f64; n];
                r.read_f64_into::<LittleEndian>(&mut v).map_err(trunc)?;
                ArrayData::F64(v)
            };
            entries.push(NamedArray { name, dims, data });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
