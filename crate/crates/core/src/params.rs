//! Named parameter storage, graph binding, and the checkpoint blob format.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    /// Frozen parameters are bound without gradient tracking.
    pub trainable: bool,
    /// Whether weight decay applies (false for biases).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// He-normal with the given fan-in.
    He(usize),
    Normal(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a freshly initialised parameter. Each name draws from its own
    /// stream seeded by `(seed, name)`, so a parameter's initial value does not
    /// depend on which other parameters exist.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        let n: usize = shape.iter().product();
        let std = match init {
            Init::Zeros => 0.0,
            Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let tensor = Tensor::new(shape.to_vec(), data).expect("valid parameter shape");
        self.insert(name, tensor, !name.ends_with(".bias"));
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, decay: bool) {
        self.params.insert(
            name.to_string(),
            Param {
                tensor,
                trainable: true,
                decay,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Name → shape listing.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor.shape().to_vec()))
            .collect()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Order-sensitive hash over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (k, p) in &self.params {
            h = (h ^ fnv1a(k.as_bytes())).wrapping_mul(0x0100_0000_01b3);
            for v in p.tensor.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path, dtype: DType) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            params: BTreeMap::new(),
        };
        let mut out = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
        let mut offset = 0usize;
        for (name, p) in &self.params {
            let len = p.tensor.blob_len(dtype);
            manifest.params.insert(
                name.clone(),
                ManifestEntry {
                    shape: p.tensor.shape().to_vec(),
                    dtype,
                    offset,
                    length: len,
                    trainable: p.trainable,
                    decay: p.decay,
                },
            );
            p.tensor.write_blob(&mut out, dtype)?;
            offset += len;
        }
        out.flush()?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format `{}`", manifest.format)));
        }
        let mut blob = Vec::new();
        BufReader::new(File::open(dir.join(WEIGHTS_FILE))?).read_to_end(&mut blob)?;
        let mut store = ParamStore::new();
        for (name, e) in manifest.params {
            let bytes = blob
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| Error::Format(format!("`{name}` runs past end of weights")))?;
            let tensor = Tensor::read_blob(bytes, e.dtype)?;
            if tensor.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{name}`: manifest shape {:?} but blob shape {:?}",
                    e.shape,
                    tensor.shape()
                )));
            }
            store.params.insert(
                name,
                Param {
                    tensor,
                    trainable: e.trainable,
                    decay: e.decay,
                },
            );
        }
        Ok(store)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MANIFEST_FORMAT: &str = "dsfpn-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    params: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    length: usize,
    trainable: bool,
    decay: bool,
}

/// Lazily loads parameters onto a graph the first time a forward pass asks
/// for them, so the tape only holds what was actually used.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    track_grad: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, track_grad: bool) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
            track_grad,
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn get(&mut self, graph: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = graph.leaf(p.tensor.clone(), self.track_grad && p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradient per bound parameter name (zeros for bound parameters that
    /// received none).
    pub fn collect_grads(&self, graph: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
