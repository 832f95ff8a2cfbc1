//! Versioned binary archive of named tensors tagged with a config hash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Parameterized, Tensor};

const MAGIC: &[u8; 4] = b"DCCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub config_hash: String,
    tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Archive { kind: kind.into(), config_hash: config_hash.into(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let mut t = t.clone();
        t.grad = None;
        self.tensors.push((name.into(), t));
    }

    pub fn push_params(&mut self, prefix: &str, p: &impl Parameterized) {
        for (name, t) in p.params() {
            self.push(format!("{prefix}.{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("archive `{}` has no tensor `{name}`", self.kind)))
    }

    /// Overwrites every parameter of `p` from `{prefix}.{name}` entries.
    pub fn load_params(&self, prefix: &str, p: &mut impl Parameterized) -> Result<()> {
        for (name, t) in p.params_mut() {
            let src = self.get(&format!("{prefix}.{name}"))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!("`{prefix}.{name}` has shape {:?}, expected {:?}", src.shape(), t.shape())));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.kind)?;
        write_str(w, &self.config_hash)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("missing checkpoint header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = read_str(r)?;
        let config_hash = read_str(r)?;
        let n = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = read_str(r)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated tensor `{name}`")))?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Archive { kind, config_hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads and checks kind and config hash.
    pub fn load(path: &Path, kind: &str, config_hash: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let a = Archive::read(&mut BufReader::new(file)).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
        if a.kind != kind {
            return Err(Error::Checkpoint { path: path.to_path_buf(), msg: format!("holds `{}`, expected `{kind}`", a.kind) });
        }
        if a.config_hash != config_hash {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("config hash {} does not match current config {config_hash}", a.config_hash),
            });
        }
        Ok(a)
    }
}

/// SHA-256 over every parameter's name and bytes, hex-encoded.
pub fn param_checksum(p: &impl Parameterized) -> String {
    let mut h = Sha256::new();
    for (name, t) in p.params() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format("string field too long".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid utf-8 in checkpoint".into()))
}
