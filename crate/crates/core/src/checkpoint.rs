//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PANOCKPT"
//! version    u32
//! header_len u64
//! header     JSON (configs, projection tag, step, tensor directory)
//! payload    f32 values of every tensor, in directory order
//! ```
//!
//! Tensors are grouped (`generator`, `whole`, `slice`, optimizer moments);
//! each entry records its name and shape.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use panocube_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{CriticConfig, Generator, GeneratorConfig};

pub const MAGIC: &[u8; 8] = b"PANOCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Identifies the cube layout and sphere parameterisation the weights were
/// trained under.
pub const PROJECTION_CONVENTION: &str = "faces=F,R,B,L,T,D;lon=atan2(x,z);up=-y;v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    projection: String,
    step: u64,
    generator: GeneratorConfig,
    whole: CriticConfig,
    slice: CriticConfig,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

pub type TensorGroup = Vec<(String, Tensor<f32>)>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub projection: String,
    pub generator: GeneratorConfig,
    pub whole: CriticConfig,
    pub slice: CriticConfig,
    /// Free-form metadata such as the training configuration.
    pub meta: serde_json::Value,
    pub groups: BTreeMap<String, TensorGroup>,
}

impl Checkpoint {
    pub fn new(step: u64, generator: GeneratorConfig, whole: CriticConfig, slice: CriticConfig) -> Self {
        Self {
            step,
            projection: PROJECTION_CONVENTION.to_string(),
            generator,
            whole,
            slice,
            meta: serde_json::Value::Null,
            groups: BTreeMap::new(),
        }
    }

    pub fn group(&self, name: &str) -> Result<&TensorGroup> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group {name:?}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let entries: Vec<Entry> = self
            .groups
            .iter()
            .flat_map(|(g, ts)| {
                ts.iter().map(move |(n, t)| Entry {
                    group: g.clone(),
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
            })
            .collect();
        let header = Header {
            projection: self.projection.clone(),
            step: self.step,
            generator: self.generator.clone(),
            whole: self.whole.clone(),
            slice: self.slice.clone(),
            meta: self.meta.clone(),
            entries,
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.groups.values().flatten().map(|(_, t)| t) {
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(bad)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(bad)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(bad)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.projection != PROJECTION_CONVENTION {
            return Err(Error::Checkpoint(format!(
                "projection convention {:?} differs from {PROJECTION_CONVENTION:?}",
                header.projection
            )));
        }
        let mut groups: BTreeMap<String, TensorGroup> = BTreeMap::new();
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(bad)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            groups
                .entry(e.group)
                .or_default()
                .push((e.name, Tensor::from_vec(data, &e.shape)));
        }
        Ok(Self {
            step: header.step,
            projection: header.projection,
            generator: header.generator,
            whole: header.whole,
            slice: header.slice,
            meta: header.meta,
            groups,
        })
    }

    /// Writes through a temporary file in the target directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        }
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Parameters, then buffers, by name.
pub fn capture_store(store: &ParamStore<f32>) -> (TensorGroup, TensorGroup) {
    let params = store.params().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let buffers = store.buffers().map(|(n, t)| (n.to_string(), t.clone())).collect();
    (params, buffers)
}

/// Overwrites every parameter and buffer of `store` from the given groups;
/// names and shapes must match exactly.
pub fn restore_store(store: &mut ParamStore<f32>, params: &TensorGroup, buffers: &TensorGroup) -> Result<()> {
    if params.len() != store.len() || buffers.len() != store.buffers().count() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} parameters and {} buffers, network has {} and {}",
            params.len(),
            buffers.len(),
            store.len(),
            store.buffers().count()
        )));
    }
    for (name, t) in params {
        store.set(name, t.clone()).map_err(Error::Validation)?;
    }
    for (name, t) in buffers {
        store.set_buffer(name, t.clone()).map_err(Error::Validation)?;
    }
    Ok(())
}

/// The generator stored in `ckpt`, ready for inference.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator<f32>> {
    let mut g = Generator::new(ckpt.generator.clone(), 0)?;
    restore_store(g.store_mut(), ckpt.group("generator")?, ckpt.group("generator.buffers")?)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(
            42,
            GeneratorConfig::for_face_size(16),
            CriticConfig::whole(16),
            CriticConfig::slice(16),
        );
        c.meta = serde_json::json!({"note": "x"});
        c.groups.insert(
            "generator".into(),
            vec![
                ("a".into(), Tensor::from_vec(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE], &[2, 2])),
                ("b".into(), Tensor::from_vec(vec![0.1], &[1])),
            ],
        );
        c.groups.insert("whole".into(), vec![("c".into(), Tensor::zeros(&[0]))]);
        c
    }

    #[test]
    fn round_trip_in_memory() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.generator, c.generator);
        assert_eq!(back.slice, c.slice);
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.groups["generator"], c.groups["generator"]);
        assert_eq!(back.groups["whole"][0].1.shape(), &[0]);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("version")), "{err}");
    }

    #[test]
    fn garbage_and_truncation_are_rejected() {
        assert!(Checkpoint::read_from(&mut b"NOTACKPT\0\0\0\0".as_slice()).is_err());
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("c.ckpt");
        sample().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.groups["generator"], sample().groups["generator"]);
    }
}
