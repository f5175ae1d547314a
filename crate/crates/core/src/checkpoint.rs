//! JSON checkpoints: parameters by name plus everything needed to decode.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::UaulConfig;
use crate::corpus::Vocabulary;
use crate::model::{ModelDims, ModelError, Seq2Seq};
use crate::tape::Matrix;

pub const FORMAT: &str = "uaul-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed checkpoint {path}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unsupported checkpoint format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("vocabulary hash mismatch (stored {stored}, computed {computed})")]
    VocabHash { stored: String, computed: String },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    dims: ModelDims,
    /// The training config in `key = value` form.
    config: String,
    vocab: Vec<String>,
    vocab_hash: String,
    params: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub vocab: Vocabulary,
    pub config: UaulConfig,
}

pub fn to_json(model: &Seq2Seq, vocab: &Vocabulary, config: &UaulConfig) -> String {
    let file = File {
        format: FORMAT.into(),
        version: VERSION,
        dims: model.dims(),
        config: config.to_text(),
        vocab: vocab.tokens().to_vec(),
        vocab_hash: vocab.hash(),
        params: model
            .params()
            .iter()
            .map(|(name, m)| Tensor {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.iter().copied().collect(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<Checkpoint, CheckpointError> {
    let file: File = serde_json::from_str(text).map_err(|source| CheckpointError::Json {
        path: PathBuf::new(),
        source,
    })?;
    from_file(file)
}

fn from_file(file: File) -> Result<Checkpoint, CheckpointError> {
    if file.format != FORMAT || file.version != VERSION {
        return Err(CheckpointError::Format {
            format: file.format,
            version: file.version,
        });
    }
    let vocab = Vocabulary::from_tokens(file.vocab).map_err(CheckpointError::Invalid)?;
    let computed = vocab.hash();
    if computed != file.vocab_hash {
        return Err(CheckpointError::VocabHash {
            stored: file.vocab_hash,
            computed,
        });
    }
    if file.dims.vocab != vocab.len() {
        return Err(CheckpointError::Invalid(format!(
            "dims.vocab {} but {} vocabulary entries",
            file.dims.vocab,
            vocab.len()
        )));
    }
    let config = UaulConfig::parse(&file.config).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let mut model = Seq2Seq::new(file.dims, 0)?;
    if file.params.len() != model.params().len() {
        return Err(CheckpointError::Invalid(format!(
            "{} tensors stored, model has {}",
            file.params.len(),
            model.params().len()
        )));
    }
    for t in file.params {
        let id = model
            .params()
            .find(&t.name)
            .ok_or_else(|| CheckpointError::Invalid(format!("unknown tensor {:?}", t.name)))?;
        let slot = model.params_mut().get_mut(id);
        if slot.dim() != (t.rows, t.cols) {
            return Err(CheckpointError::Invalid(format!(
                "tensor {:?} has shape {}x{}, expected {:?}",
                t.name,
                t.rows,
                t.cols,
                slot.dim()
            )));
        }
        *slot = Matrix::from_shape_vec((t.rows, t.cols), t.data)
            .map_err(|e| CheckpointError::Invalid(format!("tensor {:?}: {e}", t.name)))?;
    }
    Ok(Checkpoint { model, vocab, config })
}

pub fn save(path: impl AsRef<Path>, model: &Seq2Seq, vocab: &Vocabulary, config: &UaulConfig) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, to_json(model, vocab, config)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: File = serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    from_file(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate, SyntheticSpec};

    #[test]
    fn round_trip_is_exact() {
        let split = generate(&SyntheticSpec::new(20, 2, 2, 3)).unwrap();
        let vocab = Vocabulary::build(&split.train);
        let cfg = UaulConfig {
            d_model: 16,
            d_ff: 32,
            ..UaulConfig::default()
        };
        let model = Seq2Seq::new(cfg.dims(vocab.len()), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&path, &model, &vocab, &cfg).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.model.params(), model.params());
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn rejects_tampered_vocab() {
        let split = generate(&SyntheticSpec::new(10, 1, 1, 3)).unwrap();
        let vocab = Vocabulary::build(&split.train);
        let cfg = UaulConfig {
            d_model: 8,
            d_ff: 8,
            ..UaulConfig::default()
        };
        let model = Seq2Seq::new(cfg.dims(vocab.len()), 1).unwrap();
        let text = to_json(&model, &vocab, &cfg).replace("\"great\"", "\"grand\"");
        assert!(matches!(from_json(&text), Err(CheckpointError::VocabHash { .. })));
        assert!(matches!(from_json("{}"), Err(CheckpointError::Json { .. })));
    }
}
