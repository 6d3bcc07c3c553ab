//! Versioned weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FRCNNWTS"
//! version  u32
//! meta_len u32, meta bytes (UTF-8, free-form JSON)
//! count    u32
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 dims }
//! count × raw f64 arrays in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NetError, Tensor};

pub const MAGIC: &[u8; 8] = b"FRCNNWTS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> NetError {
    NetError::Weights(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NetError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, NetError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    String::from_utf8(b).map_err(|_| bad("non-UTF-8 string in header"))
}

impl WeightFile {
    pub fn new(meta: impl Into<String>, tensors: Vec<(String, Tensor)>) -> Self {
        WeightFile {
            meta: meta.into(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short for magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic; not a weight file"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported weight file version {version}, expected {VERSION}"
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let meta = read_string(r, meta_len)?;
        let count = read_u32(r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let name = read_string(r, nlen)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated data for tensor {name}")))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(WeightFile { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let io = |e| NetError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let f = File::open(path).map_err(|e| NetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        WeightFile::read_from(&mut BufReader::new(f))
    }

    /// Copies tensors into `targets`, requiring every expected name to be
    /// present with the same shape.
    pub fn assign(&self, names: &[String], targets: Vec<&mut Tensor>) -> Result<(), NetError> {
        for (name, dst) in names.iter().zip(targets) {
            let src = self
                .get(name)
                .ok_or_else(|| bad(format!("weight file has no tensor named {name}")))?;
            if src.shape() != dst.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?} in file but model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        WeightFile::new(
            "{\"iteration\":3}",
            vec![
                (
                    "a".into(),
                    Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap(),
                ),
                ("b".into(), Tensor::zeros(&[3])),
            ],
        )
    }

    #[test]
    fn roundtrip() {
        let w = sample();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(WeightFile::read_from(&mut buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bumped = buf.clone();
        bumped[8] = 2;
        assert!(WeightFile::read_from(&mut bumped.as_slice())
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(WeightFile::read_from(&mut &buf[..buf.len() - 3]).is_err());

        let w = sample();
        let mut wrong = Tensor::zeros(&[4]);
        let err = w.assign(&["a".into()], vec![&mut wrong]).unwrap_err();
        assert!(err.to_string().contains("shape"));
        let mut ok = Tensor::zeros(&[2, 2]);
        w.assign(&["a".into()], vec![&mut ok]).unwrap();
        assert_eq!(ok.data()[1], -2.5);
    }
}
