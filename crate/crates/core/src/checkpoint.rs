//! Binary checkpoint format.
//!
//! ```text
//! b"MITS" | u32 version | u32 len, config text | u32 count
//! count × ( u32 len, name | u8 rank | rank × u32 dim | f32 data )
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::MitConfig;
use crate::error::{CheckpointError, Result};
use crate::model::{param_specs, SegFormer};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: [u8; 4] = *b"MITS";
pub const VERSION: u32 = 1;

/// Serialize to bytes.
pub fn to_bytes(model: &SegFormer<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * model.num_params());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

/// Parse bytes into a model, validating every tensor against the embedded config.
pub fn from_bytes(bytes: &[u8]) -> Result<SegFormer<f32>> {
    let mut r = Reader { buf: bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let text = r.string("config")?;
    let config = MitConfig::from_text(&text).map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
    config.check().map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
    let specs = param_specs(&config);
    let count = r.u32("tensor count")? as usize;

    let mut store = ParamStore::default();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let spec = specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        if spec.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: spec.shape.clone(),
                found: shape,
            }
            .into());
        }
        let raw = r.take(4 * numel(&shape), "tensor data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        store
            .insert(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| CheckpointError::Malformed(format!("tensor `{name}` appears twice")))?;
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.buf.len())).into());
    }
    if let Some(missing) = specs.iter().find(|s| store.get(&s.name).is_none()) {
        return Err(CheckpointError::MissingTensor(missing.name.clone()).into());
    }
    // definition order, independent of file order
    let mut ordered = ParamStore::default();
    for s in &specs {
        ordered.insert(s.name.clone(), store.get(&s.name).unwrap().clone())?;
    }
    SegFormer::from_params(config, ordered)
}

pub fn save(model: &SegFormer<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SegFormer<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Load and require the embedded config to equal `expected`.
pub fn load_expecting(path: impl AsRef<Path>, expected: &MitConfig) -> Result<SegFormer<f32>> {
    let model = load(path)?;
    if &model.config != expected {
        return Err(CheckpointError::ConfigMismatch {
            version: VERSION,
            detail: describe_diff(expected, &model.config),
        }
        .into());
    }
    Ok(model)
}

fn describe_diff(expected: &MitConfig, found: &MitConfig) -> String {
    let a = expected.to_text();
    let b = found.to_text();
    let diffs: Vec<String> = a
        .lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("expected `{x}`, found `{y}`"))
        .collect();
    if diffs.is_empty() {
        "configs differ".into()
    } else {
        diffs.join("; ")
    }
}
