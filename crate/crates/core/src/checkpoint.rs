//! Binary named-tensor checkpoints.
//!
//! Layout, little-endian: magic `STRL`, u32 version, u32 tensor count, then
//! per tensor a u16 name length and UTF-8 name, u8 rank, u32 dims, u8 dtype
//! tag and the raw payload, then a CRC-32 of everything before it. Tensors
//! are written sorted by name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{Config, ConfigError};
use crate::tensor::{Adam, ParamStore, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"STRL";
pub const VERSION: u32 = 1;

const CONFIG_KEY: &str = "config";
const STEP_KEY: &str = "adam.step";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}, expected {VERSION}")]
    Version(u32),
    #[error("checksum mismatch: file is truncated or corrupt")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint lacks `{0}`")]
    Missing(String),
    #[error("checkpoint tensor `{name}` has shape {got:?}, model expects {expected:?}")]
    Shape { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error("stored configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
    U32(Vec<u32>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::Bytes(_) => 1,
            Payload::U32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::Bytes(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn f32(t: &Tensor<f32>) -> Self {
        Entry {
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().to_vec()),
        }
    }

    fn tensor(&self, name: &str) -> Result<Tensor<f32>, CheckpointError> {
        match &self.payload {
            Payload::F32(v) => Ok(Tensor::new(&self.shape, v.clone())?),
            _ => Err(CheckpointError::Format(format!("`{name}` is not a float tensor"))),
        }
    }
}

pub type Table = BTreeMap<String, Entry>;

pub fn encode(table: &Table) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, e) in table {
        let numel: usize = e.shape.iter().product();
        if numel != e.payload.len() {
            return Err(CheckpointError::Format(format!("`{name}`: shape {:?} vs {} values", e.shape, e.payload.len())));
        }
        let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(e.payload.tag());
        match &e.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(v) => out.extend_from_slice(v),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Table, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader { bytes: body, at: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()?;
    let mut table = Table::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let payload = match r.u8()? {
            0 => Payload::F32(r.take(4 * numel)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Payload::Bytes(r.take(numel)?.to_vec()),
            2 => Payload::U32(r.take(4 * numel)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            t => return Err(CheckpointError::Format(format!("`{name}`: unknown dtype tag {t}"))),
        };
        if table.insert(name.clone(), Entry { shape, payload }).is_some() {
            return Err(CheckpointError::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.at != body.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(table)
}

pub fn write(path: &Path, table: &Table) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(table)?).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read(path: &Path) -> Result<Table, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Parameters, running statistics, optimizer moments and the configuration.
pub fn snapshot(config: &Config, store: &ParamStore<f32>, adam: &Adam<f32>) -> Table {
    let mut table = Table::new();
    for (name, t) in store.named_tensors() {
        table.insert(name.to_string(), Entry::f32(t));
    }
    for (i, id) in store.ids().enumerate() {
        let (m, v) = adam.moments(i);
        let name = store.name(id);
        table.insert(format!("adam.m.{name}"), Entry::f32(m));
        table.insert(format!("adam.v.{name}"), Entry::f32(v));
    }
    table.insert(
        STEP_KEY.into(),
        Entry {
            shape: vec![1],
            payload: Payload::U32(vec![adam.step_count()]),
        },
    );
    let text = config.to_text().into_bytes();
    table.insert(
        CONFIG_KEY.into(),
        Entry {
            shape: vec![text.len()],
            payload: Payload::Bytes(text),
        },
    );
    table
}

/// The configuration stored in a table.
pub fn stored_config(table: &Table) -> Result<Config, CheckpointError> {
    match table.get(CONFIG_KEY).map(|e| &e.payload) {
        Some(Payload::Bytes(b)) => {
            let text = std::str::from_utf8(b).map_err(|_| CheckpointError::Format("configuration is not UTF-8".into()))?;
            Ok(Config::parse(text)?)
        }
        Some(_) => Err(CheckpointError::Format("configuration entry has the wrong dtype".into())),
        None => Err(CheckpointError::Missing(CONFIG_KEY.into())),
    }
}

/// Copy a table into a freshly built store and optimizer of the same layout.
pub fn restore(table: &Table, store: &mut ParamStore<f32>, adam: &mut Adam<f32>) -> Result<(), CheckpointError> {
    let fetch = |name: &str, expected: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let e = table.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if e.shape != expected {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                got: e.shape.clone(),
                expected: expected.to_vec(),
            });
        }
        e.tensor(name)
    };
    let names: Vec<(String, Vec<usize>)> = store.named_tensors().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in &names {
        let t = fetch(name, shape)?;
        store.assign(name, t)?;
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for id in store.ids() {
        let shape = store.value(id).shape().to_vec();
        first.push(fetch(&format!("adam.m.{}", store.name(id)), &shape)?);
        second.push(fetch(&format!("adam.v.{}", store.name(id)), &shape)?);
    }
    let step = match table.get(STEP_KEY).map(|e| &e.payload) {
        Some(Payload::U32(v)) if v.len() == 1 => v[0],
        Some(_) => return Err(CheckpointError::Format(format!("`{STEP_KEY}` is malformed"))),
        None => return Err(CheckpointError::Missing(STEP_KEY.into())),
    };
    adam.restore(step, first, second)?;
    let expected = names.len() + 2 * store.len() + 2;
    if table.len() != expected {
        let known: std::collections::HashSet<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
        let extra = table
            .keys()
            .find(|k| !known.contains(k.as_str()) && !k.starts_with("adam.") && k.as_str() != CONFIG_KEY)
            .cloned()
            .unwrap_or_default();
        return Err(CheckpointError::Format(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}
