//! Named, layer-partitioned parameter tensors and their on-disk form.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Tensor;

use super::DetectorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
    Source,
}

impl Role {
    fn to_byte(self) -> u8 {
        match self {
            Role::Student => 0,
            Role::Teacher => 1,
            Role::Source => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Student),
            1 => Some(Role::Teacher),
            2 => Some(Role::Source),
            _ => None,
        }
    }
}

/// Ordered map of layer name to flat tensor. Student, teacher, and source
/// stores of one model share the same schema (names and shapes).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    role: Role,
    layers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(role: Role, layers: BTreeMap<String, Tensor>) -> Self {
        ParamStore { role, layers }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.get(name)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.layers.iter()
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &String> {
        self.layers.keys()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.layers.values().map(Tensor::numel).sum()
    }

    /// Same layer names and shapes.
    pub fn schema_matches(&self, other: &ParamStore) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(other.layers.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Rebuild with one tensor per layer, preserving names; shapes must match.
    pub fn map<E>(
        &self,
        mut f: impl FnMut(&str, &Tensor) -> Result<Tensor, E>,
    ) -> Result<ParamStore, E> {
        let mut layers = BTreeMap::new();
        for (name, t) in &self.layers {
            layers.insert(name.clone(), f(name, t)?);
        }
        Ok(ParamStore {
            role: self.role,
            layers,
        })
    }

    /// FNV-1a over layer names and little-endian element bytes; bit-exact
    /// identity check for determinism tests.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF29CE484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001B3);
            }
        };
        for (name, t) in &self.layers {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_le_bytes());
            }
        }
        h
    }
}

/// He-normal weights, zero biases, in a fixed layer order so a seed pins the
/// whole store.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.classes + 1;
    let specs: Vec<(&str, Vec<usize>, usize)> = vec![
        ("conv1.w", vec![cfg.mid_channels, 9], 9),
        ("conv1.b", vec![cfg.mid_channels], 0),
        (
            "conv2.w",
            vec![cfg.feat_channels, cfg.mid_channels * 9],
            cfg.mid_channels * 9,
        ),
        ("conv2.b", vec![cfg.feat_channels], 0),
        (
            "conv3.w",
            vec![cfg.feat_channels, cfg.feat_channels * 9],
            cfg.feat_channels * 9,
        ),
        ("conv3.b", vec![cfg.feat_channels], 0),
        ("rpn.obj.w", vec![1, cfg.feat_channels], cfg.feat_channels),
        ("rpn.obj.b", vec![1], 0),
        ("rpn.box.w", vec![4, cfg.feat_channels], cfg.feat_channels),
        ("rpn.box.b", vec![4], 0),
        ("roi.fc.w", vec![cfg.hidden, cfg.feat_channels], cfg.feat_channels),
        ("roi.fc.b", vec![cfg.hidden], 0),
        ("roi.cls.w", vec![k, cfg.hidden], cfg.hidden),
        ("roi.cls.b", vec![k], 0),
        ("roi.box.w", vec![4, cfg.hidden], cfg.hidden),
        ("roi.box.b", vec![4], 0),
    ];
    let mut layers = BTreeMap::new();
    for (name, shape, fan_in) in specs {
        let numel: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; numel]
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            (0..numel).map(|_| dist.sample(&mut rng)).collect()
        };
        layers.insert(name.to_string(), Tensor::from_vec(shape, data));
    }
    let _ = rng.gen::<u64>(); // burn one draw so future schema edits shift everything
    ParamStore::new(Role::Source, layers)
}

// ── Serialization ────────────────────────────────────────────────────
//
// Layout (all integers little-endian):
//   magic   b"TPS1"
//   role    u8
//   seed    u64     provenance
//   frames  u32     provenance
//   map     f64     provenance (clean mAP at save time)
//   nlayers u32
//   per layer: name_len u32, name utf8, ndim u32, dims u64 x ndim,
//              data f64 x numel

const MAGIC: &[u8; 4] = b"TPS1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt store at byte {offset}: {what}")]
    Corrupt { offset: usize, what: String },
}

/// Training provenance carried in the file header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub frames: u32,
    pub clean_map: f64,
}

#[derive(Clone, Debug)]
pub struct SavedStore {
    pub store: ParamStore,
    pub provenance: Provenance,
}

pub fn save_store(path: &Path, store: &ParamStore, prov: &Provenance) -> Result<(), StoreError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(store.role().to_byte());
    buf.extend_from_slice(&prov.seed.to_le_bytes());
    buf.extend_from_slice(&prov.frames.to_le_bytes());
    buf.extend_from_slice(&prov.clean_map.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.layers() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], StoreError> {
        if self.pos + n > self.buf.len() {
            return Err(StoreError::Corrupt {
                offset: self.pos,
                what: format!("unexpected end of file reading {what} ({n} bytes)"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, StoreError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_store(path: &Path) -> Result<SavedStore, StoreError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(StoreError::Corrupt {
            offset: 0,
            what: format!("bad magic {magic:?}"),
        });
    }
    let role_byte = r.u8("role")?;
    let role = Role::from_byte(role_byte).ok_or(StoreError::Corrupt {
        offset: 4,
        what: format!("unknown role byte {role_byte}"),
    })?;
    let seed = r.u64("seed")?;
    let frames = r.u32("frames")?;
    let clean_map = r.f64("clean mAP")?;
    let nlayers = r.u32("layer count")? as usize;

    let mut layers = BTreeMap::new();
    for i in 0..nlayers {
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(StoreError::Corrupt {
                offset: r.pos - 4,
                what: format!("layer {i}: implausible name length {name_len}"),
            });
        }
        let name_off = r.pos;
        let name_bytes = r.take(name_len, "layer name")?.to_vec();
        let name = String::from_utf8(name_bytes).map_err(|_| StoreError::Corrupt {
            offset: name_off,
            what: format!("layer {i}: name is not utf8"),
        })?;
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(StoreError::Corrupt {
                offset: r.pos - 4,
                what: format!("layer {name:?}: implausible rank {ndim}"),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("element")?);
        }
        layers.insert(name, Tensor::from_vec(shape, data));
    }
    if r.pos != r.buf.len() {
        return Err(StoreError::Corrupt {
            offset: r.pos,
            what: format!("{} trailing bytes", r.buf.len() - r.pos),
        });
    }
    Ok(SavedStore {
        store: ParamStore::new(role, layers),
        provenance: Provenance {
            seed,
            frames,
            clean_map,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = DetectorConfig::default();
        let a = init_params(&cfg, 0);
        let b = init_params(&cfg, 0);
        let c = init_params(&cfg, 1);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn biases_start_at_zero() {
        let cfg = DetectorConfig::default();
        let p = init_params(&cfg, 0);
        assert!(p.get("conv1.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("roi.cls.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let cfg = DetectorConfig::default();
        let store = init_params(&cfg, 42);
        let prov = Provenance {
            seed: 42,
            frames: 300,
            clean_map: 0.875,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_store(&path, &store, &prov).unwrap();
        let loaded = load_store(&path).unwrap();
        assert_eq!(loaded.store.checksum(), store.checksum());
        assert_eq!(loaded.provenance, prov);
        assert_eq!(loaded.store.role(), Role::Source);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let cfg = DetectorConfig::default();
        let store = init_params(&cfg, 7);
        let prov = Provenance {
            seed: 7,
            frames: 10,
            clean_map: 0.9,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_store(&path, &store, &prov).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, bytes).unwrap();
        let err = load_store(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("corrupt store at byte"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_store(&path),
            Err(StoreError::Corrupt { offset: 0, .. })
        ));
    }

    #[test]
    fn schema_match_detects_shape_drift() {
        let cfg = DetectorConfig::default();
        let a = init_params(&cfg, 0);
        let b = init_params(&cfg, 5);
        assert!(a.schema_matches(&b));
        let wider = DetectorConfig {
            hidden: 64,
            ..DetectorConfig::default()
        };
        let c = init_params(&wider, 0);
        assert!(!a.schema_matches(&c));
    }
}
