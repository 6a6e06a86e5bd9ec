//! Binary checkpoints: parameters, batch-norm buffers, Adam moments, step
//! and seed, tagged with the model config they belong to.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainState;

const MAGIC: &[u8; 4] = b"PFDC";
const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, state: &TrainState) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut buf, cfg.echo().as_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.seed.to_le_bytes());
    let groups = [
        (KIND_PARAM, state.params.params()),
        (KIND_BUFFER, state.params.buffers()),
        (KIND_ADAM_M, &state.adam.m),
        (KIND_ADAM_V, &state.adam.v),
    ];
    let count: usize = groups.iter().map(|(_, g)| g.len()).sum();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (kind, group) in groups {
        for (name, t) in group {
            buf.push(kind);
            put_bytes(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 name".into()))
    }
}

/// Loads a checkpoint, failing if it was written for a different config or
/// if any name or shape disagrees with `cfg`.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let echo = r.string()?;
    if echo != cfg.echo() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written for a different model config:\n{echo}"
        )));
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut groups: [IndexMap<String, Tensor>; 4] = Default::default();
    for _ in 0..count {
        let kind = r.u8()?;
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let group = groups
            .get_mut(kind as usize)
            .ok_or_else(|| Error::Format(format!("unknown entry kind {kind}")))?;
        group.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint entries".into()));
    }
    let [params, buffers, m, v] = groups;
    let store = ParamStore::from_parts(params, buffers);
    store.check_layout(cfg)?;
    for moments in [&m, &v] {
        for (name, t) in moments {
            let p = store
                .params()
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            if p.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
        }
    }
    Ok(TrainState {
        params: store,
        adam: Adam { m, v },
        step,
        seed,
    })
}
