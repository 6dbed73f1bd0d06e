// SPDX-License-Identifier: Apache-2.0

//! Checkpoint files: a header line, one JSON metadata line, then the
//! parameters as little-endian f64 in store order, then optionally the
//! Adam first and second moments in the same order.

use std::fs;
use std::path::Path;

use bpdg_tensor::{AdamState, ParamStore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::classifier::{ClassifierConfig, SequenceClassifier};
use crate::corpus::{AttributeTables, Vocabulary};
use crate::error::{BpdgError, Result};
use crate::model::{Ablation, BpdgModel};

pub const CHECKPOINT_HEADER: &str = "bpdg-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `generator`, `relevance` or `bipersona`.
    pub kind: String,
    pub step: u64,
    pub vocab_digest: String,
    pub params: Vec<ParamEntry>,
    pub has_optimizer: bool,
    pub run_config_digest: Option<String>,
    /// Kind-specific configuration needed to rebuild the parameter store.
    pub payload: serde_json::Value,
}

pub struct RawCheckpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
    pub optimizer: Option<Vec<f64>>,
}

pub fn param_entries(store: &ParamStore) -> Vec<ParamEntry> {
    store
        .ids()
        .map(|id| ParamEntry {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
        })
        .collect()
}

pub fn encode_checkpoint(meta: &CheckpointMeta, store: &ParamStore, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    let json = serde_json::to_string(meta).map_err(|e| BpdgError::Schema(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for x in store.flatten() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(a) = adam {
        for x in a.flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], what: &str) -> Result<(&'a str, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| BpdgError::Schema(format!("checkpoint truncated before {what}")))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| BpdgError::Schema(format!("{what} is not UTF-8")))?;
    Ok((line, &bytes[nl + 1..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    let (header, rest) = take_line(bytes, "header")?;
    if header != CHECKPOINT_HEADER {
        return Err(BpdgError::Schema(format!("unknown checkpoint header {header:?}")));
    }
    let (json, body) = take_line(rest, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_str(json).map_err(|e| BpdgError::Schema(format!("checkpoint metadata: {e}")))?;
    let n: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let expected = 8 * n * if meta.has_optimizer { 3 } else { 1 };
    if body.len() != expected {
        return Err(BpdgError::Schema(format!(
            "checkpoint body has {} bytes, expected {expected}",
            body.len()
        )));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (params, opt) = floats.split_at(n);
    Ok(RawCheckpoint {
        params: params.to_vec(),
        optimizer: meta.has_optimizer.then(|| opt.to_vec()),
        meta,
    })
}

pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    let bytes = encode_checkpoint(meta, store, adam)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| BpdgError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| BpdgError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path).map_err(|e| BpdgError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        BpdgError::Schema(m) => BpdgError::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| BpdgError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of the parameter values alone.
pub fn store_digest(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for x in store.flatten() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl RawCheckpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(BpdgError::Schema(format!(
                "expected a {kind} checkpoint, found {}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    pub fn payload<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.payload.clone())
            .map_err(|e| BpdgError::Schema(format!("checkpoint payload: {e}")))
    }

    /// Copies parameters into a freshly built store with the same layout.
    pub fn restore(&self, store: &mut ParamStore, adam: Option<&mut AdamState>) -> Result<()> {
        if param_entries(store) != self.meta.params {
            return Err(BpdgError::Schema("checkpoint parameter layout does not match the model".into()));
        }
        store.load_flat(&self.params)?;
        if let (Some(a), Some(flat)) = (adam, &self.optimizer) {
            a.load_flat(flat, self.meta.step)?;
        }
        Ok(())
    }
}

pub const KIND_GENERATOR: &str = "generator";
pub const KIND_RELEVANCE: &str = "relevance";
pub const KIND_BIPERSONA: &str = "bipersona";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorPayload {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub vocab: Vocabulary,
    pub tables: AttributeTables,
}

pub struct LoadedGenerator {
    pub model: BpdgModel,
    pub adam: Option<AdamState>,
    pub vocab: Vocabulary,
    pub tables: AttributeTables,
    pub meta: CheckpointMeta,
}

pub fn save_generator(
    path: &Path,
    model: &BpdgModel,
    adam: Option<&AdamState>,
    vocab: &Vocabulary,
    tables: &AttributeTables,
    run_config_digest: Option<String>,
) -> Result<()> {
    let payload = GeneratorPayload {
        config: model.config.clone(),
        ablation: model.ablation,
        vocab: vocab.clone(),
        tables: tables.clone(),
    };
    let meta = CheckpointMeta {
        kind: KIND_GENERATOR.into(),
        step: adam.map_or(0, |a| a.step),
        vocab_digest: vocab.digest(),
        params: param_entries(&model.store),
        has_optimizer: adam.is_some(),
        run_config_digest,
        payload: serde_json::to_value(payload).map_err(|e| BpdgError::Schema(e.to_string()))?,
    };
    write_checkpoint(path, &meta, &model.store, adam)
}

pub fn load_generator(path: &Path) -> Result<LoadedGenerator> {
    let raw = read_checkpoint(path)?;
    raw.expect_kind(KIND_GENERATOR)?;
    let p: GeneratorPayload = raw.payload()?;
    if p.vocab.digest() != raw.meta.vocab_digest {
        return Err(BpdgError::Schema(format!("{}: vocabulary digest mismatch", path.display())));
    }
    let mut model = BpdgModel::new(p.config, p.ablation, 0)?;
    let mut adam = raw.meta.has_optimizer.then(|| AdamState::new(&model.store));
    raw.restore(&mut model.store, adam.as_mut())?;
    Ok(LoadedGenerator {
        model,
        adam,
        vocab: p.vocab,
        tables: p.tables,
        meta: raw.meta,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierPayload {
    pub config: ClassifierConfig,
    pub vocab_size: usize,
    pub num_segments: usize,
    pub classes: usize,
}

pub fn save_classifier(
    path: &Path,
    kind: &str,
    clf: &SequenceClassifier,
    vocab: &Vocabulary,
    run_config_digest: Option<String>,
) -> Result<()> {
    let payload = ClassifierPayload {
        config: clf.config.clone(),
        vocab_size: clf.vocab_size,
        num_segments: clf.num_segments,
        classes: clf.classes,
    };
    let meta = CheckpointMeta {
        kind: kind.into(),
        step: 0,
        vocab_digest: vocab.digest(),
        params: param_entries(&clf.store),
        has_optimizer: false,
        run_config_digest,
        payload: serde_json::to_value(payload).map_err(|e| BpdgError::Schema(e.to_string()))?,
    };
    write_checkpoint(path, &meta, &clf.store, None)
}

/// Loads a classifier and checks it was built over `vocab`.
pub fn load_classifier(path: &Path, kind: &str, vocab: &Vocabulary) -> Result<SequenceClassifier> {
    let raw = read_checkpoint(path)?;
    raw.expect_kind(kind)?;
    if raw.meta.vocab_digest != vocab.digest() {
        return Err(BpdgError::Schema(format!(
            "{}: classifier was trained with a different vocabulary",
            path.display()
        )));
    }
    let p: ClassifierPayload = raw.payload()?;
    let mut clf = SequenceClassifier::new(p.config, p.vocab_size, p.num_segments, p.classes)?;
    raw.restore(&mut clf.store, None)?;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpdg_tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![1.5, -0.25]).unwrap());
        s.add("b", Tensor::new(vec![1, 1], vec![f64::MIN_POSITIVE]).unwrap());
        s
    }

    fn meta(s: &ParamStore, opt: bool) -> CheckpointMeta {
        CheckpointMeta {
            kind: "test".into(),
            step: 7,
            vocab_digest: "x".into(),
            params: param_entries(s),
            has_optimizer: opt,
            run_config_digest: None,
            payload: serde_json::json!({"k": 1}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let mut adam = AdamState::new(&s);
        adam.m[0][1] = 0.125;
        adam.v[1][0] = 3.0;
        let bytes = encode_checkpoint(&meta(&s, true), &s, Some(&adam)).unwrap();
        let raw = decode_checkpoint(&bytes).unwrap();
        let mut t = store();
        t.load_flat(&[0.0, 0.0, 0.0]).unwrap();
        let mut a2 = AdamState::new(&t);
        raw.restore(&mut t, Some(&mut a2)).unwrap();
        assert_eq!(t.flatten(), s.flatten());
        assert_eq!(a2.flatten(), adam.flatten());
        assert_eq!(a2.step, 7);
    }

    #[test]
    fn corrupt_files_are_schema_errors() {
        let s = store();
        let bytes = encode_checkpoint(&meta(&s, false), &s, None).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(BpdgError::Schema(_))));
        let mut bad = bytes.clone();
        bad[0] = b'x';
        assert!(matches!(decode_checkpoint(&bad), Err(BpdgError::Schema(_))));
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3]));
        let raw = decode_checkpoint(&bytes).unwrap();
        assert!(raw.restore(&mut other, None).is_err());
    }
}
