//! Named-tensor container used for checkpoints.
//!
//! Layout (little-endian): magic `PSRC`, version u32, entry count u32, then per
//! entry a u16-length UTF-8 name, dtype u8 (0 = f32, 1 = f64), rank u8, rank
//! u32 dims and the row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PSRC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.tensor(name)?;
        if t.len() != 1 {
            return Err(Error::Data(format!("checkpoint entry {name:?} is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("entry name too long: {}", e.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype as u8);
            let dims = e.tensor.dims();
            out.push(u8::try_from(dims.len()).map_err(|_| Error::Data(format!("rank too high for {}", e.name)))?);
            for &d in dims {
                let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension too large in {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match e.dtype {
                DType::F32 => {
                    for &x in e.tensor.data() {
                        out.extend_from_slice(&(x as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &x in e.tensor.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path.display().to_string(), "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::format(path.display().to_string(), "entry name is not UTF-8"))?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                d => {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("entry {name:?}: unknown dtype {d}"),
                    ))
                }
            };
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = match dtype {
                DType::F32 => r
                    .take(
                        len.checked_mul(4)
                            .ok_or_else(|| Error::format(path.display().to_string(), "payload size overflow"))?,
                    )?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => r
                    .take(
                        len.checked_mul(8)
                            .ok_or_else(|| Error::format(path.display().to_string(), "payload size overflow"))?,
                    )?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            entries.push(Entry {
                name,
                dtype,
                tensor: Tensor::new(dims, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                path.display().to_string(),
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint { entries })
    }

    /// Write to `path` through a sibling temp file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path.display().to_string(),
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push(
            "a",
            DType::F32,
            Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3]).unwrap(),
        );
        c.push("b.scalar", DType::F64, Tensor::scalar(std::f64::consts::PI));
        c.push("empty", DType::F64, Tensor::new(vec![0], vec![]).unwrap());
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.scalar("b.scalar").unwrap(), std::f64::consts::PI);
        assert_eq!(back.tensor("a").unwrap().data()[5], 1e-3f32 as f64);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PSRC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'a');
        assert_eq!((bytes[15], bytes[16]), (0, 2));
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 11, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("x")).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("x")).is_err());
    }
}
