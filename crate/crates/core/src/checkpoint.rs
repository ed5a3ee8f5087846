//! On-disk checkpoints: a directory holding the configuration, raw weights
//! with a JSON manifest, the vocabulary, the keyword inventory and,
//! optionally, optimizer moments and the training state.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::corpus::{KeywordInventory, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{DialogueModel, LossOptions};
use crate::tape::Mat;
use crate::trainer::{AdamState, OptimizerConfig, TrainState};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const INVENTORY_FILE: &str = "inventory.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "train_state.json";

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub n_types: usize,
    pub n_topics: usize,
    pub loss: LossOptions,
    pub optimizer: OptimizerConfig,
}

impl CheckpointMeta {
    pub fn new(model: &DialogueModel, loss: LossOptions, optimizer: OptimizerConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.config.clone(),
            n_types: model.n_types(),
            n_topics: model.n_topics(),
            loss,
            optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in `f64` elements.
    pub offset: usize,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: DialogueModel,
    pub vocab: Vocabulary,
    pub inventory: KeywordInventory,
    pub adam: Option<AdamState>,
    pub state: Option<TrainState>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(buf)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn encode_mats<'a>(mats: impl Iterator<Item = &'a Mat>) -> Vec<u8> {
    let mut out = Vec::new();
    for m in mats {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_f64s(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Schema(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

/// Writes a complete checkpoint into a temporary sibling directory and then
/// swaps it into place, so readers never observe a partial checkpoint.
pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    model: &DialogueModel,
    vocab: &Vocabulary,
    inventory: &KeywordInventory,
    training: Option<(&AdamState, &TrainState)>,
) -> Result<()> {
    let tmp = sibling(dir, ".tmp");
    let old = sibling(dir, ".old");
    for p in [&tmp, &old] {
        if p.exists() {
            fs::remove_dir_all(p).map_err(|e| Error::io(format!("removing {}", p.display()), e))?;
        }
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;

    let mut manifest = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        let (rows, cols) = p.value.dim();
        manifest.push(TensorEntry {
            name: p.name.clone(),
            rows,
            cols,
            offset,
        });
        offset += rows * cols;
    }
    write_file(
        &tmp.join(CONFIG_FILE),
        serde_json::to_string_pretty(meta)?.as_bytes(),
    )?;
    write_file(
        &tmp.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    write_file(
        &tmp.join(WEIGHTS_FILE),
        &encode_mats(model.store.iter().map(|(_, p)| &p.value)),
    )?;
    write_file(
        &tmp.join(VOCAB_FILE),
        serde_json::to_string(vocab)?.as_bytes(),
    )?;
    write_file(
        &tmp.join(INVENTORY_FILE),
        serde_json::to_string_pretty(inventory)?.as_bytes(),
    )?;
    if let Some((adam, state)) = training {
        let mut bytes = (adam.t).to_le_bytes().to_vec();
        bytes.extend(encode_mats(adam.m.iter().chain(adam.v.iter())));
        write_file(&tmp.join(OPTIMIZER_FILE), &bytes)?;
        write_file(
            &tmp.join(STATE_FILE),
            serde_json::to_string_pretty(state)?.as_bytes(),
        )?;
    }

    if dir.exists() {
        fs::rename(dir, &old)
            .map_err(|e| Error::io(format!("moving aside {}", dir.display()), e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(format!("installing {}", dir.display()), e))?;
    if old.exists() {
        fs::remove_dir_all(&old)
            .map_err(|e| Error::io(format!("removing {}", old.display()), e))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = read_json(&dir.join(CONFIG_FILE))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "{}: format version {} is not supported",
            dir.display(),
            meta.format_version
        )));
    }
    let mut model = DialogueModel::new(&meta.model, meta.n_types, meta.n_topics)?;
    let manifest: Vec<TensorEntry> = read_json(&dir.join(MANIFEST_FILE))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let values = decode_f64s(&read_file(&weights_path)?, &weights_path)?;
    if manifest.len() != model.store.len() {
        return Err(Error::Schema(format!(
            "manifest lists {} tensors, the configured model has {}",
            manifest.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest) {
        let want = model.store.get(id).dim();
        if model.store.name(id) != entry.name || want != (entry.rows, entry.cols) {
            return Err(Error::Schema(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                (entry.rows, entry.cols),
                model.store.name(id),
                want
            )));
        }
        let end = entry.offset + entry.rows * entry.cols;
        let slice = values.get(entry.offset..end).ok_or_else(|| {
            Error::Schema(format!(
                "{}: tensor {} runs past the end of the file",
                weights_path.display(),
                entry.name
            ))
        })?;
        *model.store.get_mut(id) =
            Mat::from_shape_vec((entry.rows, entry.cols), slice.to_vec()).expect("sized");
    }

    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let inventory = KeywordInventory::load(&dir.join(INVENTORY_FILE))?;
    if vocab.len() != meta.model.vocab_size {
        return Err(Error::Schema(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            meta.model.vocab_size
        )));
    }
    if inventory.n_types() != meta.n_types || inventory.n_topics() != meta.n_topics {
        return Err(Error::Schema(
            "keyword inventory does not match the model heads".into(),
        ));
    }

    let opt_path = dir.join(OPTIMIZER_FILE);
    let (adam, state) = if opt_path.exists() {
        let bytes = read_file(&opt_path)?;
        if bytes.len() < 8 {
            return Err(Error::Schema(format!("{}: truncated", opt_path.display())));
        }
        let t = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let vals = decode_f64s(&bytes[8..], &opt_path)?;
        let total: usize = manifest.iter().map(|e| e.rows * e.cols).sum();
        if vals.len() != 2 * total {
            return Err(Error::Schema(format!(
                "{}: expected {} values, found {}",
                opt_path.display(),
                2 * total,
                vals.len()
            )));
        }
        let unpack = |base: usize| -> Vec<Mat> {
            manifest
                .iter()
                .map(|e| {
                    let s = base + e.offset;
                    Mat::from_shape_vec((e.rows, e.cols), vals[s..s + e.rows * e.cols].to_vec())
                        .expect("sized")
                })
                .collect()
        };
        let adam = AdamState {
            m: unpack(0),
            v: unpack(total),
            t,
        };
        let state: TrainState = read_json(&dir.join(STATE_FILE))?;
        (Some(adam), Some(state))
    } else {
        (None, None)
    };
    Ok(Checkpoint {
        meta,
        model,
        vocab,
        inventory,
        adam,
        state,
    })
}
