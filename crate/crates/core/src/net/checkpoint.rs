//! Flat tensor files and the checkpoint container.
//!
//! A tensor is four little-endian `u32` dims followed by row-major
//! little-endian `f32` values. A checkpoint is the magic `FGCK`, a `u32`
//! version, the network configuration as length-prefixed TOML, the epoch,
//! and a list of length-prefixed names each followed by a tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Visit;
use super::model::ResNet;
use super::tensor::Tensor4;
use super::{NetConfig, NetError};

const MAGIC: &[u8; 4] = b"FGCK";
const VERSION: u32 = 1;
/// Refuse absurd sizes from corrupt headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 31;

fn bad(msg: impl Into<String>) -> NetError {
    NetError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor4<f32>) -> Result<(), NetError> {
    for d in t.dims() {
        let d = u32::try_from(d).map_err(|_| bad("tensor dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor4<f32>, NetError> {
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let n: u64 = dims.iter().map(|&d| d as u64).product();
    if dims.contains(&0) || n > MAX_ELEMENTS {
        return Err(bad(format!("invalid tensor dims {dims:?}")));
    }
    let mut raw = vec![0u8; n as usize * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor4::from_vec(dims, data))
}

pub fn save_tensor_file(path: &Path, t: &Tensor4<f32>) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor_file(path: &Path) -> Result<Tensor4<f32>, NetError> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad(format!("{}: trailing bytes after tensor", path.display())));
    }
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    net: NetConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub epoch: usize,
    /// Parameters and buffers keyed by name, in name order.
    pub tensors: BTreeMap<String, Tensor4<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &mut ResNet<f32>, epoch: usize) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit_params("", &mut |n, p| {
            tensors.insert(n, p.value.clone());
        });
        model.visit_buffers("", &mut |n, t| {
            tensors.insert(n, t.clone());
        });
        Self {
            config: model.config.clone(),
            epoch,
            tensors,
        }
    }

    /// Rebuild the model; every stored tensor must match a model slot exactly.
    pub fn to_model(&self) -> Result<ResNet<f32>, NetError> {
        let mut model = ResNet::new(self.config.clone(), 0)?;
        let mut seen = BTreeSet::new();
        let mut err = None;
        let mut assign = |name: String, slot: &mut Tensor4<f32>| {
            match self.tensors.get(&name) {
                Some(t) if t.dims() == slot.dims() => *slot = t.clone(),
                Some(t) => {
                    err.get_or_insert(bad(format!("{name}: stored dims {:?}, model expects {:?}", t.dims(), slot.dims())));
                }
                None => {
                    err.get_or_insert(bad(format!("missing tensor {name}")));
                }
            }
            seen.insert(name);
        };
        model.visit_params("", &mut |n, p| assign(n, &mut p.value));
        model.visit_buffers("", &mut |n, t| assign(n, t));
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = self.tensors.keys().find(|k| !seen.contains(*k)) {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), NetError> {
        let header = toml::to_string(&Header {
            epoch: self.epoch,
            net: self.config.clone(),
        })
        .map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self, NetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let text = read_string(r)?;
        let header: Header = toml::from_str(&text).map_err(|e| bad(format!("config echo: {e}")))?;
        header.net.validate()?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let t = read_tensor(r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        Ok(Self {
            config: header.net,
            epoch: header.epoch,
            tensors,
        })
    }
}

fn read_string(r: &mut impl Read) -> Result<String, NetError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(bad("string field too long"));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| bad("string field is not UTF-8"))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    ckpt.write(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let mut r = BufReader::new(File::open(path)?);
    Checkpoint::read(&mut r)
}
