//! Versioned binary tensor container: checkpoints and dataset caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MTLS"
//! version u32
//! config  u32 length + canonical `key = value` text
//! count   u32
//! tensor  u32 name length + name
//!         u8  dtype tag (1 = f32, 2 = f64, 3 = u32)
//!         u32 rank
//!         u64 extent per rank
//!         raw little-endian values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use mtlsi_core::optim::AdamW;
use mtlsi_core::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MTLS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    U32(Vec<usize>, Vec<u32>),
}

impl TensorData {
    fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F32(..) => 1,
            TensorData::F64(..) => 2,
            TensorData::U32(..) => 3,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(s, _) | TensorData::F64(s, _) | TensorData::U32(s, _) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub config: String,
    pub entries: Vec<(String, TensorData)>,
}

impl Container {
    pub fn new(config: String) -> Self {
        Container {
            version: FORMAT_VERSION,
            config,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: TensorData) {
        self.entries.push((name.into(), data));
    }

    pub fn find(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype_tag());
            let shape = data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match data {
                TensorData::F32(_, v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(_, v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::U32(_, v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            bail!("bad magic: expected MTLS");
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            bail!("unsupported container version {version}");
        }
        let config_len = r.u32()? as usize;
        let config =
            String::from_utf8(r.take(config_len)?.to_vec()).context("config text is not utf-8")?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).context("name is not utf-8")?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .context("tensor volume overflows")?;
            let data = match tag {
                1 => {
                    let raw = r.take(4 * n)?;
                    TensorData::F32(
                        shape,
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                2 => {
                    let raw = r.take(8 * n)?;
                    TensorData::F64(
                        shape,
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                3 => {
                    let raw = r.take(4 * n)?;
                    TensorData::U32(
                        shape,
                        raw.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => bail!("unknown dtype tag {other}"),
            };
            entries.push((name, data));
        }
        if r.pos != bytes.len() {
            bail!("trailing bytes after last tensor");
        }
        Ok(Container {
            version,
            config,
            entries,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("create {}", path.display()))?,
        );
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut r =
            BufReader::new(File::open(path).with_context(|| format!("open {}", path.display()))?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!("container truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Precision-aware bridging between core tensors and container entries.
pub trait ContainerReal: Real {
    fn to_data(t: &Tensor<Self>) -> TensorData;
    fn from_data(d: &TensorData) -> Option<Tensor<Self>>;
}

impl ContainerReal for f32 {
    fn to_data(t: &Tensor<f32>) -> TensorData {
        TensorData::F32(t.shape().to_vec(), t.data().to_vec())
    }
    fn from_data(d: &TensorData) -> Option<Tensor<f32>> {
        match d {
            TensorData::F32(s, v) => Tensor::from_vec(s, v.clone()).ok(),
            _ => None,
        }
    }
}

impl ContainerReal for f64 {
    fn to_data(t: &Tensor<f64>) -> TensorData {
        TensorData::F64(t.shape().to_vec(), t.data().to_vec())
    }
    fn from_data(d: &TensorData) -> Option<Tensor<f64>> {
        match d {
            TensorData::F64(s, v) => Tensor::from_vec(s, v.clone()).ok(),
            _ => None,
        }
    }
}

/// Serializes params, optimizer moments and the step counter.
pub fn checkpoint_to_container<T: ContainerReal>(
    config_text: String,
    store: &ParamStore<T>,
    opt: &AdamW<T>,
) -> Container {
    let mut c = Container::new(config_text);
    for (_, p) in store.iter() {
        c.push(format!("param.{}", p.name), T::to_data(&p.value));
    }
    let (m, v) = opt.moments();
    for ((_, p), (m, v)) in store.iter().zip(m.iter().zip(v)) {
        c.push(format!("adam.m.{}", p.name), T::to_data(m));
        c.push(format!("adam.v.{}", p.name), T::to_data(v));
    }
    c.push(
        "meta.step",
        TensorData::U32(vec![1], vec![opt.step_count() as u32]),
    );
    c
}

/// Restores params and optimizer state into a freshly built model whose
/// store carries the same parameter names.
pub fn restore_checkpoint<T: ContainerReal>(
    container: &Container,
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut ms = Vec::with_capacity(ids.len());
    let mut vs = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.get(id).name.clone();
        let value = container
            .find(&format!("param.{name}"))
            .and_then(T::from_data)
            .with_context(|| format!("checkpoint missing param {name} at this precision"))?;
        if value.shape() != store.get(id).value.shape() {
            bail!("checkpoint shape mismatch for {name}");
        }
        store.get_mut(id).value = value;
        let m = container
            .find(&format!("adam.m.{name}"))
            .and_then(T::from_data)
            .with_context(|| format!("checkpoint missing moment m for {name}"))?;
        let v = container
            .find(&format!("adam.v.{name}"))
            .and_then(T::from_data)
            .with_context(|| format!("checkpoint missing moment v for {name}"))?;
        if m.shape() != store.get(id).value.shape() || v.shape() != m.shape() {
            bail!("checkpoint moment shape mismatch for {name}");
        }
        ms.push(m);
        vs.push(v);
    }
    let step = match container.find("meta.step") {
        Some(TensorData::U32(_, v)) if v.len() == 1 => v[0] as usize,
        _ => bail!("checkpoint missing meta.step"),
    };
    opt.restore(step, ms, vs)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bytes_and_values() {
        let mut c = Container::new("a = 1\nb = two\n".into());
        c.push("x", TensorData::F32(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]));
        c.push(
            "y",
            TensorData::F64(vec![3], vec![0.1, f64::MIN_POSITIVE, -1.0]),
        );
        c.push("z", TensorData::U32(vec![4], vec![0, 1, 2, u32::MAX]));
        let bytes = c.encode();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, c);
        // byte-stable: re-encoding is identical
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let mut c = Container::new("k = v".into());
        c.push("x", TensorData::U32(vec![1], vec![7]));
        let bytes = c.encode();
        assert!(Container::decode(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::decode(&bad).is_err());
    }
}
