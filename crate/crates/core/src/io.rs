//! CST1 binary tensor files and the plain-text manifest used for checkpoints.
//!
//! Layout: magic `CSCATNSR`, u32 rank, rank × u32 extents, u8 dtype tag
//! (0 = f32, 1 = f64), then the row-major payload. All integers and floats
//! are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::Module;
use crate::scalar::{DType, Scalar};
use crate::tensor::{fmt_shape, numel_of, Tensor};

pub const MAGIC: &[u8; 8] = b"CSCATNSR";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// A decoded tensor in whichever precision the file carried.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when it already matches).
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 4 * t.rank() + 1 + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_any<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag[0])))?;
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("zero extent in {}", fmt_shape(&shape))));
    }
    let mut payload = vec![0u8; numel_of(&shape) * dtype.size()];
    r.read_exact(&mut payload)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, &payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, &payload)?),
    })
}

fn decode_payload<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_any(fs::File::open(path)?)
}

/// Loads a tensor, converting its precision to `T` if needed.
pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(load_any(path)?.into_tensor())
}

/// One line of a manifest: `name shape file`, shape written as `4x8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn shape_token(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape_token(tok: &str) -> Result<Vec<usize>> {
    if tok == "scalar" {
        return Ok(Vec::new());
    }
    tok.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape token {tok:?}")))
        })
        .collect()
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {}\n", e.name, shape_token(&e.shape), e.file))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, file] = fields[..] else {
                return Err(Error::Format(format!(
                    "manifest line {}: expected `name shape file`",
                    lineno + 1
                )));
            };
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: parse_shape_token(shape)?,
                file: file.to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Writes every parameter of `module` as `<name>.cst` plus a manifest.
pub fn save_module<T: Scalar, M: Module<T> + ?Sized>(dir: impl AsRef<Path>, module: &M) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    let mut failure = None;
    module.visit_params("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let file = format!("{name}.cst");
        if let Err(e) = save_tensor(dir.join(&file), &p.value) {
            failure = Some(e);
        }
        manifest.entries.push(ManifestEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            file,
        });
    });
    if let Some(e) = failure {
        return Err(e);
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

/// Restores parameters saved by [`save_module`]; names and shapes must match.
pub fn load_module<T: Scalar, M: Module<T> + ?Sized>(dir: impl AsRef<Path>, module: &mut M) -> Result<()> {
    let dir = dir.as_ref();
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut failure = None;
    module.visit_params_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let loaded = manifest
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest has no entry for {name}")))
            .and_then(|e| load_tensor::<T>(dir.join(&e.file)));
        match loaded {
            Ok(t) if t.shape() == p.value.shape() => p.value = t,
            Ok(t) => {
                failure = Some(Error::Format(format!(
                    "{name}: stored shape {} but module expects {}",
                    fmt_shape(t.shape()),
                    fmt_shape(p.value.shape())
                )))
            }
            Err(e) => failure = Some(e),
        }
    });
    failure.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..8], b"CSCATNSR");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &3u32.to_le_bytes());
        assert_eq!(bytes[20], 0);
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 6 * 4);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut bytes = encode(&t);
        bytes[20 - 4] = 7; // dtype tag for rank 1 sits at offset 16
        assert!(matches!(read_any(&bytes[..]), Err(Error::Format(_))));

        let bytes = encode(&t);
        assert!(read_any(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_any(&bad[..]), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_text() {
        let m = Manifest {
            entries: vec![
                ManifestEntry {
                    name: "proj.w_q".into(),
                    shape: vec![4, 8],
                    file: "proj.w_q.cst".into(),
                },
                ManifestEntry {
                    name: "loss".into(),
                    shape: vec![],
                    file: "loss.cst".into(),
                },
            ],
        };
        let text = m.to_text();
        assert_eq!(text, "proj.w_q 4x8 proj.w_q.cst\nloss scalar loss.cst\n");
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(Manifest::parse("only two").is_err());
    }
}
