//! `MLCK` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MLCK"            4 bytes
//! version           u16
//! meta_count        u32
//!   key_len u16, key bytes, value_len u32, value bytes     (sorted by key)
//! entry_count       u32
//!   name_len u16, name bytes, dtype u8 (0 = f32), ndim u8, dims u32 * ndim
//! payload           f32 * prod(dims), entry by entry in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::netcore::params::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    /// Values widened to `f64` in a `[rows x cols]` array; arrays of rank
    /// above two are flattened into `[dim0 x rest]`.
    pub fn to_array2(&self) -> Array2<f64> {
        let (rows, cols) = match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        Array2::from_shape_vec((rows, cols), self.data.iter().map(|&x| x as f64).collect())
            .expect("shape matches payload")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Adds an array; values are narrowed to `f32`.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data: values.iter().map(|&x| x as f32).collect(),
        });
    }

    pub fn push_array2(&mut self, name: impl Into<String>, value: &Array2<f64>) {
        let data: Vec<f64> = value.iter().copied().collect();
        self.push(name, vec![value.nrows(), value.ncols()], &data);
    }

    /// Stores every parameter under `<prefix><name>`.
    pub fn push_params(&mut self, prefix: &str, params: &ModelParams) {
        for (name, value) in params.iter() {
            self.push_array2(format!("{prefix}{name}"), value);
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn array2(&self, name: &str) -> Option<Array2<f64>> {
        self.array(name).map(NamedArray::to_array2)
    }

    /// All arrays whose name starts with `prefix`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> ModelParams {
        let mut p = ModelParams::new();
        for a in &self.arrays {
            if let Some(rest) = a.name.strip_prefix(prefix) {
                p.insert(rest, a.to_array2());
            }
        }
        p
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            let k_len = u16::try_from(k.len())
                .map_err(|_| Error::Format(format!("meta key too long: {k}")))?;
            out.extend_from_slice(&k_len.to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let n_len = u16::try_from(a.name.len())
                .map_err(|_| Error::Format(format!("array name too long: {}", a.name)))?;
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Format(format!("array `{}` shape/payload mismatch", a.name)));
            }
            out.extend_from_slice(&n_len.to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for a in &self.arrays {
            for x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic, expected MLCK".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k_len = r.u16()? as usize;
            let k = r.string(k_len)?;
            let v_len = r.u32()? as usize;
            let v = r.string(v_len)?;
            meta.insert(k, v);
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n_len = r.u16()? as usize;
            let name = r.string(n_len)?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("unsupported dtype {dtype} for `{name}`")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut arrays = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
