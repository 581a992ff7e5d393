//! Versioned on-disk artifacts: weights, tokenizer, model config, and
//! TF-IDF statistics. Every format is fixed-endianness and self-describing,
//! so archives written on one platform load on any other.
//!
//! Weights are binary: magic `HTDW`, little-endian u32 format version, u32
//! tensor count, then per tensor a u32 name length, the UTF-8 name, u32
//! rank, rank u32 dims, and the row-major f32 values. The tokenizer is
//! plain text (`HTDT v1 <rule-version>` header, then `id<TAB>token` lines
//! in id order). Config and TF-IDF stats are single JSON documents.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::hybridnet::{HybridModelParams, HybridNetError, ModelConfig};
use crate::numgrad::Tensor;
use crate::textproc::{TfIdfModel, Vocabulary, RULE_VERSION};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"HTDW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a weights archive (bad magic)")]
    BadMagic,
    #[error("unsupported weights format version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("archive is truncated")]
    TruncatedFile,
    #[error("duplicate tensor name `{name}`")]
    DuplicateTensorName { name: String },
    #[error("tokenizer header `{found}` does not match `{expected}`")]
    VersionMismatch { expected: String, found: String },
    #[error("config is missing required field `{0}`")]
    MissingField(String),
    #[error("malformed {what}: {message}")]
    Malformed { what: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] HybridNetError),
}

fn malformed(what: &'static str, message: impl Into<String>) -> PersistError {
    PersistError::Malformed {
        what,
        message: message.into(),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), PersistError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            PersistError::TruncatedFile
        } else {
            PersistError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, PersistError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Writes the parameter tensors, f32-rounded, in canonical slot order.
pub fn save_weights(
    params: &HybridModelParams,
    config: &ModelConfig,
    path: &Path,
) -> Result<(), PersistError> {
    let named = params.named_tensors(config);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    write_u32(&mut w, WEIGHTS_VERSION)?;
    write_u32(&mut w, named.len() as u32)?;
    for (name, tensor) in named {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, tensor.dims().len() as u32)?;
        for &d in tensor.dims() {
            write_u32(&mut w, d as u32)?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_tensor_entry(r: &mut impl Read) -> Result<(String, Tensor), PersistError> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(malformed("weights", "implausible tensor name length"));
    }
    let mut name_buf = vec![0u8; name_len];
    read_exact(r, &mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| malformed("weights", "tensor name is not UTF-8"))?;
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(malformed("weights", format!("tensor `{name}` has rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        if d == 0 {
            return Err(malformed("weights", format!("tensor `{name}` has a zero dim")));
        }
        count = count
            .checked_mul(d)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| malformed("weights", format!("tensor `{name}` is implausibly large")))?;
        dims.push(d);
    }
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        read_exact(r, &mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok((name, Tensor::new(dims, data)))
}

/// Loads a weights archive and reassembles parameters for `config`,
/// checking names and dims.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<HybridModelParams, PersistError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(PersistError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(PersistError::UnsupportedVersion { found: version });
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, tensor) = read_tensor_entry(&mut r)?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(PersistError::DuplicateTensorName { name });
        }
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(malformed("weights", "trailing bytes after last tensor"));
    }
    Ok(HybridModelParams::from_named(config, tensors)?)
}

/// Rounds every parameter through f32, exactly as a save/load cycle does.
pub fn round_to_f32(params: &HybridModelParams) -> HybridModelParams {
    let mut out = params.clone();
    for slot in out.slots_mut() {
        for v in slot.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}

fn tokenizer_header() -> String {
    format!("HTDT v1 {RULE_VERSION}")
}

pub fn save_tokenizer(vocab: &Vocabulary, path: &Path) -> Result<(), PersistError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", tokenizer_header())?;
    for (id, token) in vocab.entries() {
        writeln!(w, "{id}\t{token}")?;
    }
    w.flush()?;
    Ok(())
}

/// Restores the id/token mapping. The header's rule version must match
/// this build's cleaning/tokenization rules.
pub fn load_tokenizer(path: &Path) -> Result<Vocabulary, PersistError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed("tokenizer", "empty file"))?;
    let expected = tokenizer_header();
    if header != expected {
        return Err(PersistError::VersionMismatch {
            expected,
            found: header.to_string(),
        });
    }
    let mut tokens = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id_part, token) = line
            .split_once('\t')
            .ok_or_else(|| malformed("tokenizer", format!("line {}: no tab", lineno + 2)))?;
        let id: usize = id_part
            .parse()
            .map_err(|_| malformed("tokenizer", format!("line {}: bad id", lineno + 2)))?;
        if id != tokens.len() + 2 {
            return Err(malformed(
                "tokenizer",
                format!("line {}: ids must be contiguous from 2", lineno + 2),
            ));
        }
        if token.is_empty() || !seen.insert(token.to_string()) {
            return Err(malformed(
                "tokenizer",
                format!("line {}: empty or duplicate token", lineno + 2),
            ));
        }
        tokens.push(token.to_string());
    }
    Ok(Vocabulary::from_token_list(tokens))
}

/// Everything needed to reproduce a run: the model config plus the split,
/// featurization, and decision conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigArchive {
    pub model: ModelConfig,
    pub split_ratio: f64,
    /// Base of the TF-IDF logarithm; this build only produces and accepts `"e"`.
    pub tfidf_log_base: String,
    /// Name of the positive class; this build only produces and accepts `"ai"`.
    pub positive_class: String,
    pub threshold: f64,
}

impl ConfigArchive {
    pub fn new(model: ModelConfig, split_ratio: f64) -> Self {
        Self {
            model,
            split_ratio,
            tfidf_log_base: "e".to_string(),
            positive_class: "ai".to_string(),
            threshold: crate::hybridnet::THRESHOLD,
        }
    }
}

const CONFIG_FIELDS: [&str; 14] = [
    "vocab_size",
    "embed_dim",
    "seq_len",
    "kernel_widths",
    "filters_per_width",
    "gru_hidden",
    "dense_hidden",
    "use_tfidf_aux",
    "dropout_rate",
    "seed",
    "split_ratio",
    "tfidf_log_base",
    "positive_class",
    "threshold",
];

/// The config document as a JSON value (what `save_config` writes).
pub fn config_value(archive: &ConfigArchive) -> serde_json::Value {
    let m = &archive.model;
    serde_json::json!({
        "vocab_size": m.vocab_size,
        "embed_dim": m.embed_dim,
        "seq_len": m.seq_len,
        "kernel_widths": m.kernel_widths,
        "filters_per_width": m.filters_per_width,
        "gru_hidden": m.gru_hidden,
        "dense_hidden": m.dense_hidden,
        "use_tfidf_aux": m.use_tfidf_aux,
        "dropout_rate": m.dropout_rate,
        "seed": m.seed,
        "split_ratio": archive.split_ratio,
        "tfidf_log_base": archive.tfidf_log_base,
        "positive_class": archive.positive_class,
        "threshold": archive.threshold,
    })
}

pub fn save_config(archive: &ConfigArchive, path: &Path) -> Result<(), PersistError> {
    let doc = config_value(archive);
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

impl From<serde_json::Error> for PersistError {
    fn from(e: serde_json::Error) -> Self {
        malformed("json", e.to_string())
    }
}

struct Fields<'a> {
    obj: &'a serde_json::Map<String, serde_json::Value>,
}

impl<'a> Fields<'a> {
    fn get(&self, name: &str) -> Result<&'a serde_json::Value, PersistError> {
        self.obj
            .get(name)
            .ok_or_else(|| PersistError::MissingField(name.to_string()))
    }

    fn usize(&self, name: &str) -> Result<usize, PersistError> {
        self.get(name)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| malformed("config", format!("`{name}` is not a non-negative integer")))
    }

    fn u64(&self, name: &str) -> Result<u64, PersistError> {
        self.get(name)?
            .as_u64()
            .ok_or_else(|| malformed("config", format!("`{name}` is not a non-negative integer")))
    }

    fn f64(&self, name: &str) -> Result<f64, PersistError> {
        self.get(name)?
            .as_f64()
            .ok_or_else(|| malformed("config", format!("`{name}` is not a number")))
    }

    fn bool(&self, name: &str) -> Result<bool, PersistError> {
        self.get(name)?
            .as_bool()
            .ok_or_else(|| malformed("config", format!("`{name}` is not a boolean")))
    }

    fn string(&self, name: &str) -> Result<String, PersistError> {
        self.get(name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed("config", format!("`{name}` is not a string")))
    }
}

/// Loads and validates a config document. Unknown fields are ignored with
/// a warning so newer archives still load.
pub fn load_config(path: &Path) -> Result<ConfigArchive, PersistError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("config", "top level is not an object"))?;
    for key in obj.keys() {
        if !CONFIG_FIELDS.contains(&key.as_str()) {
            log::warn!("config: ignoring unknown field `{key}`");
        }
    }
    let f = Fields { obj };

    let widths_value = f.get("kernel_widths")?;
    let widths_arr = widths_value
        .as_array()
        .ok_or_else(|| malformed("config", "`kernel_widths` is not an array"))?;
    let mut kernel_widths = Vec::with_capacity(widths_arr.len());
    for v in widths_arr {
        kernel_widths.push(
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| malformed("config", "`kernel_widths` entries must be integers"))?,
        );
    }

    let model = ModelConfig {
        vocab_size: f.usize("vocab_size")?,
        embed_dim: f.usize("embed_dim")?,
        seq_len: f.usize("seq_len")?,
        kernel_widths,
        filters_per_width: f.usize("filters_per_width")?,
        gru_hidden: f.usize("gru_hidden")?,
        dense_hidden: f.usize("dense_hidden")?,
        use_tfidf_aux: f.bool("use_tfidf_aux")?,
        dropout_rate: f.f64("dropout_rate")?,
        seed: f.u64("seed")?,
    };
    let archive = ConfigArchive {
        model,
        split_ratio: f.f64("split_ratio")?,
        tfidf_log_base: f.string("tfidf_log_base")?,
        positive_class: f.string("positive_class")?,
        threshold: f.f64("threshold")?,
    };
    if archive.tfidf_log_base != "e" {
        return Err(malformed(
            "config",
            format!("unsupported tfidf_log_base `{}`", archive.tfidf_log_base),
        ));
    }
    if archive.positive_class != "ai" {
        return Err(malformed(
            "config",
            format!("unsupported positive_class `{}`", archive.positive_class),
        ));
    }
    if archive.threshold != crate::hybridnet::THRESHOLD {
        return Err(malformed(
            "config",
            format!("unsupported threshold {}", archive.threshold),
        ));
    }
    Ok(archive)
}

pub fn save_tfidf(model: &TfIdfModel, path: &Path) -> Result<(), PersistError> {
    let doc_freq: BTreeMap<&str, usize> = model.terms().collect();
    let doc = serde_json::json!({
        "n_documents": model.n_documents(),
        "doc_freq": doc_freq,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

pub fn load_tfidf(path: &Path) -> Result<TfIdfModel, PersistError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("tfidf stats", "top level is not an object"))?;
    let n_documents = obj
        .get("n_documents")
        .ok_or_else(|| PersistError::MissingField("n_documents".to_string()))?
        .as_u64()
        .ok_or_else(|| malformed("tfidf stats", "`n_documents` is not an integer"))?
        as usize;
    let freq_obj = obj
        .get("doc_freq")
        .ok_or_else(|| PersistError::MissingField("doc_freq".to_string()))?
        .as_object()
        .ok_or_else(|| malformed("tfidf stats", "`doc_freq` is not an object"))?;
    let mut doc_freq = HashMap::with_capacity(freq_obj.len());
    for (token, v) in freq_obj {
        let df = v
            .as_u64()
            .ok_or_else(|| malformed("tfidf stats", format!("df of `{token}` is not an integer")))?;
        doc_freq.insert(token.clone(), df as usize);
    }
    Ok(TfIdfModel::from_parts(n_documents, doc_freq))
}
