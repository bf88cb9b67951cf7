//! Checkpoint container (little-endian):
//!
//! ```text
//! "S4CK" | u32 version | u8 bytes-per-value | u64 metadata length | metadata (JSON text)
//! u32 tensor count | per tensor: u16 name length, name, u8 rank, u64 dims, values
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::autodiff::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::train::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"S4CK";

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, ModelError> {
        use rand::SeedableRng;
        let bad = |what: &str| ModelError::Checkpoint(format!("invalid rng state: {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config: ModelConfig,
    pub weights: ParamStore<T>,
    pub optimizer: Option<AdamState<T>>,
    pub rng_state: Option<RngState>,
    /// Validation score this checkpoint was selected by.
    pub validation_macro_auroc: Option<f64>,
    /// Training passes completed when saved.
    pub train_epoch: usize,
    /// Free-form annotations (class order, data source, ...).
    pub extra: BTreeMap<String, String>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &Model<T>) -> Self {
        Self {
            config: model.config.clone(),
            weights: model.params.clone(),
            optimizer: None,
            rng_state: None,
            validation_macro_auroc: None,
            train_epoch: 0,
            extra: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<Model<T>, ModelError> {
        let mut m = Model::new(self.config.clone(), 0)?;
        m.load_weights(&self.weights)?;
        Ok(m)
    }
}

impl<T: Real> Model<T> {
    /// Copies weights by name; every model tensor must be present with the same shape and
    /// the store must hold nothing else.
    pub fn load_weights(&mut self, store: &ParamStore<T>) -> Result<(), ModelError> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let src = store
                .id(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
            let (have, want) = (store.get(src).shape(), self.params.get(id).shape());
            if have != want {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {have:?}, model expects {want:?}"
                )));
            }
            *self.params.get_mut(id) = store.get(src).clone();
        }
        if store.len() != self.params.len() {
            let extra = store.iter().find(|(n, _)| self.params.id(n).is_none()).map(|(n, _)| n.to_string());
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds tensor {} that the model does not have",
                extra.unwrap_or_default()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: String,
    dtype: String,
    config: ModelConfig,
    validation_macro_auroc: Option<f64>,
    train_epoch: usize,
    rng_state: Option<RngState>,
    optimizer_step: Option<u64>,
    extra: BTreeMap<String, String>,
}

fn ck_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let width = std::mem::size_of::<T>();
    for &v in t.data() {
        if width == 4 {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<(), ModelError> {
    let meta = Metadata {
        format: "s4ecg-checkpoint".into(),
        dtype: T::NAME.into(),
        config: ckpt.config.clone(),
        validation_macro_auroc: ckpt.validation_macro_auroc,
        train_epoch: ckpt.train_epoch,
        rng_state: ckpt.rng_state.clone(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        extra: ckpt.extra.clone(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| ck_err(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(std::mem::size_of::<T>() as u8);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let mut tensors: Vec<(String, &Tensor<T>)> = ckpt.weights.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != ckpt.weights.len() || opt.v.len() != ckpt.weights.len() {
            return Err(ck_err("optimizer state does not match the weights"));
        }
        for ((name, _), (m, v)) in ckpt.weights.iter().zip(opt.m.iter().zip(&opt.v)) {
            tensors.push((format!("adam.m/{name}"), m));
            tensors.push((format!("adam.v/{name}"), v));
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ModelError::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, out).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ck_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize, ModelError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| ck_err("length overflows"))
    }
}

/// Bytes per stored value (4 or 8), read from the file preamble.
pub fn checkpoint_value_width(path: &Path) -> Result<usize, ModelError> {
    use std::io::Read;
    let mut head = [0u8; 9];
    let mut f = fs::File::open(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
    f.read_exact(&mut head).map_err(|_| ck_err("truncated preamble"))?;
    if &head[..4] != MAGIC {
        return Err(ck_err("not a checkpoint file"));
    }
    Ok(head[8] as usize)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(ck_err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let width = c.take(1)?[0] as usize;
    if width != std::mem::size_of::<T>() {
        return Err(ck_err(format!("stores {width}-byte values, requested {}", T::NAME)));
    }
    let meta_len = c.u64()?;
    let meta: Metadata = serde_json::from_slice(c.take(meta_len)?).map_err(|e| ck_err(format!("metadata: {e}")))?;
    let count = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes")) as usize;
    let mut weights = ParamStore::new();
    let mut moments: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| ck_err("tensor name is not UTF-8"))?.to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(width).ok_or_else(|| ck_err(format!("tensor {name} too large")))?)?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4).map(|b| T::c(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|b| T::c(f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect()
        };
        let t = Tensor::from_vec(&shape, data);
        if name.starts_with("adam.") {
            moments.insert(name, t);
        } else {
            if weights.id(&name).is_some() {
                return Err(ck_err(format!("tensor {name} appears twice")));
            }
            weights.add(name, t);
        }
    }
    if c.pos != bytes.len() {
        return Err(ck_err(format!("{} trailing byte(s)", bytes.len() - c.pos)));
    }
    let optimizer = match meta.optimizer_step {
        None => None,
        Some(step) => {
            let mut m = Vec::with_capacity(weights.len());
            let mut v = Vec::with_capacity(weights.len());
            for (name, w) in weights.iter() {
                for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                    let t = moments
                        .remove(&format!("{prefix}{name}"))
                        .ok_or_else(|| ck_err(format!("optimizer moment {prefix}{name} missing")))?;
                    if t.shape() != w.shape() {
                        return Err(ck_err(format!("optimizer moment {prefix}{name} has shape {:?}", t.shape())));
                    }
                    dst.push(t);
                }
            }
            Some(AdamState { step, m, v })
        }
    };
    if let Some(name) = moments.keys().next() {
        return Err(ck_err(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        config: meta.config,
        weights,
        optimizer,
        rng_state: meta.rng_state,
        validation_macro_auroc: meta.validation_macro_auroc,
        train_epoch: meta.train_epoch,
        extra: meta.extra,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    fn cfg(n_classes: usize) -> ModelConfig {
        ModelConfig { epoch_len: 64, d_model: 8, d_state: 4, conv_channels: 4, input_epochs: 2, n_classes, ..ModelConfig::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(cfg(3), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: u64 = rng.random();
        let mut ck = Checkpoint::from_model(&model);
        ck.optimizer = Some(AdamState::new(&model.params));
        ck.optimizer.as_mut().unwrap().step = 17;
        ck.rng_state = Some(RngState::capture(&rng));
        ck.validation_macro_auroc = Some(0.8125);
        ck.extra.insert("classes".into(), "N,AF,AFLT".into());
        save_checkpoint(&ck, &path).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.rng_state.as_ref().unwrap().restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
        let x: Vec<f32> = (0..128).map(|i| (i as f32 * 0.2).sin()).collect();
        let a = model.forward(&x, 1, false).unwrap();
        let b = back.model().unwrap().forward(&x, 1, false).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mismatched_classes_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Checkpoint::from_model(&Model::<f32>::new(cfg(3), 1).unwrap()), &path).unwrap();
        let ck: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        let mut other = Model::<f32>::new(cfg(4), 1).unwrap();
        let err = other.load_weights(&ck.weights).unwrap_err().to_string();
        assert!(err.contains("head.w"), "{err}");
    }

    #[test]
    fn dtype_and_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Checkpoint::from_model(&Model::<f32>::new(cfg(3), 1).unwrap()), &path).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint::<f32>(&path).unwrap_err().to_string().contains("version"));
    }
}
