//! Binary checkpoint format.
//!
//! ```text
//! "CACECKPT" | version u32 | kind u8 | sha256(config json) [32]
//! | meta_len u64 | meta json | n_params u64
//! | per param: name_len u64 | name | ndim u64 | dims u64* | f64 data
//! | sha256 of everything above [32]
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::classifier::{Classifier, ClassifierConfig, ClassifierHistory};
use super::cvae::{ConditionalVae, VaeConfig, VaeHistory};
use super::ModelError;
use crate::autodiff::{Params, Tensor};

const MAGIC: &[u8; 8] = b"CACECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Vae,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Classifier => 1,
            ModelKind::Vae => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, ModelError> {
        match tag {
            1 => Ok(ModelKind::Classifier),
            2 => Ok(ModelKind::Vae),
            t => Err(ModelError::Corrupt(format!("unknown model kind {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Classifier(Classifier),
    Vae(ConditionalVae),
}

impl SavedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SavedModel::Classifier(_) => ModelKind::Classifier,
            SavedModel::Vae(_) => ModelKind::Vae,
        }
    }

    pub fn into_classifier(self) -> Result<Classifier, ModelError> {
        match self {
            SavedModel::Classifier(c) => Ok(c),
            SavedModel::Vae(_) => Err(ModelError::Config(
                "checkpoint holds a VAE, not a classifier".into(),
            )),
        }
    }

    pub fn into_vae(self) -> Result<ConditionalVae, ModelError> {
        match self {
            SavedModel::Vae(v) => Ok(v),
            SavedModel::Classifier(_) => Err(ModelError::Config(
                "checkpoint holds a classifier, not a VAE".into(),
            )),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    history: ClassifierHistory,
}

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    config: VaeConfig,
    n_classes: usize,
    n_concept_values: usize,
    image_shape: [usize; 3],
    history: VaeHistory,
}

fn encode(model: &SavedModel) -> Result<Vec<u8>, ModelError> {
    let (config_json, meta_json, params) = match model {
        SavedModel::Classifier(c) => (
            serde_json::to_vec(&c.config)?,
            serde_json::to_vec(&ClassifierMeta {
                config: c.config.clone(),
                history: c.history.clone(),
            })?,
            &c.params,
        ),
        SavedModel::Vae(v) => (
            serde_json::to_vec(&v.config)?,
            serde_json::to_vec(&VaeMeta {
                config: v.config.clone(),
                n_classes: v.n_classes,
                n_concept_values: v.n_concept_values,
                image_shape: v.image_shape,
                history: v.history.clone(),
            })?,
            &v.params,
        ),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(model.kind().tag());
    out.extend_from_slice(&Sha256::digest(&config_json));
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = Sha256::digest(&out);
    out.extend_from_slice(&checksum);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, ModelError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| ModelError::Corrupt(format!("implausible length {v} at byte {}", self.pos - 8)))
    }
}

fn decode(bytes: &[u8]) -> Result<SavedModel, ModelError> {
    if bytes.len() < MAGIC.len() + 4 + 1 + 32 + 32 || &bytes[..8] != MAGIC {
        return Err(ModelError::Corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(ModelError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let kind = ModelKind::from_tag(r.take(1)?[0])?;
    let config_digest = r.take(32)?.to_vec();
    let meta_len = r.len()?;
    let meta = r.take(meta_len)?;
    let n_params = r.len()?;
    let mut params = Params::new();
    for _ in 0..n_params {
        let name_len = r.len()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Corrupt("parameter name is not UTF-8".into()))?;
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let data = r
            .take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| ModelError::Corrupt("tensor too large".into()))?,
            )?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?.with_requires_grad(true));
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    let check_digest = |config_json: Vec<u8>| {
        if Sha256::digest(&config_json).as_slice() != config_digest.as_slice() {
            return Err(ModelError::Corrupt("config digest mismatch".into()));
        }
        Ok(())
    };
    match kind {
        ModelKind::Classifier => {
            let m: ClassifierMeta = serde_json::from_slice(meta)?;
            check_digest(serde_json::to_vec(&m.config)?)?;
            let mut c = Classifier::from_parts(m.config, params)?;
            c.history = m.history;
            Ok(SavedModel::Classifier(c))
        }
        ModelKind::Vae => {
            let m: VaeMeta = serde_json::from_slice(meta)?;
            check_digest(serde_json::to_vec(&m.config)?)?;
            let mut v = ConditionalVae::initialize(m.config, m.n_classes, m.n_concept_values, m.image_shape)?;
            for (name, t) in &v.params {
                match params.get(name) {
                    Some(p) if p.shape() == t.shape() => {}
                    _ => {
                        return Err(ModelError::Corrupt(format!(
                            "parameter '{name}' missing or misshapen"
                        )))
                    }
                }
            }
            if params.len() != v.params.len() {
                return Err(ModelError::Corrupt("unexpected extra parameters".into()));
            }
            v.params = params;
            v.history = m.history;
            Ok(SavedModel::Vae(v))
        }
    }
}

/// Write a checkpoint atomically (temp file, then rename).
pub fn save_model(model: &SavedModel, path: &Path) -> Result<(), ModelError> {
    let bytes = encode(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel, ModelError> {
    decode(&fs::read(path)?)
}
