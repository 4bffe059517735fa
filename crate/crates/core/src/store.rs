//! Versioned on-disk model format.
//!
//! A file is a plain-text header of `key=value` lines, the first being the
//! magic line, terminated by an empty line, followed by the parameter blobs
//! as little-endian `f64`, row-major: `P`, `Q`, and for NAIS `W`, `b`, `h`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{AttentionNet, AttentionVariant, Embeddings, FismParams, ModelError, ModelParams, NaisParams};

pub const MAGIC: &str = "NAIS-MODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a model file (missing {MAGIC} header)")]
    BadMagic,
    #[error("unsupported model format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("parameter data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn header(params: &ModelParams) -> String {
    let mut lines = vec![MAGIC.to_string(), format!("version={FORMAT_VERSION}")];
    match params {
        ModelParams::Fism(m) => {
            lines.push("kind=fism".into());
            lines.push(format!("num_items={}", m.num_items()));
            lines.push(format!("k={}", m.k()));
            lines.push(format!("alpha={}", m.alpha));
        }
        ModelParams::Nais(m) => {
            lines.push("kind=nais".into());
            lines.push(format!("num_items={}", m.num_items()));
            lines.push(format!("k={}", m.k()));
            lines.push(format!("attention_factor={}", m.net.factor()));
            lines.push(format!("beta={}", m.beta));
            lines.push(format!("variant={}", m.net.variant));
        }
    }
    let mut text = lines.join("\n");
    text.push_str("\n\n");
    text
}

fn blobs(params: &ModelParams) -> Vec<&[f64]> {
    match params {
        ModelParams::Fism(m) => vec![m.p.as_slice(), m.q.as_slice()],
        ModelParams::Nais(m) => vec![m.p.as_slice(), m.q.as_slice(), &m.net.w, &m.net.b, &m.net.h],
    }
}

/// Serializes `params` into the model file format.
pub fn encode_model(params: &ModelParams) -> Result<Vec<u8>, StoreError> {
    params.validate()?;
    let mut out = header(params).into_bytes();
    for blob in blobs(params) {
        for x in blob {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let bytes = encode_model(params)?;
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    file.sync_all().map_err(io_err)
}

struct Header {
    fields: BTreeMap<String, String>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str, StoreError> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| StoreError::Header(format!("missing key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, StoreError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| StoreError::Header(format!("bad value {raw:?} for {key:?}")))
    }
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8]), StoreError> {
    if !bytes.starts_with(MAGIC.as_bytes()) || bytes.get(MAGIC.len()) != Some(&b'\n') {
        return Err(StoreError::BadMagic);
    }
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| StoreError::Header("missing blank line after header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| StoreError::Header("header is not UTF-8".into()))?;
    let mut fields = BTreeMap::new();
    for line in text.lines().skip(1) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| StoreError::Header(format!("line {line:?} is not key=value")))?;
        if fields.insert(key.to_string(), value.to_string()).is_some() {
            return Err(StoreError::Header(format!("duplicate key {key:?}")));
        }
    }
    let header = Header { fields };
    let version = header.get("version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(StoreError::UnsupportedVersion(version.to_string()));
    }
    Ok((header, &bytes[end + 2..]))
}

fn read_blobs(data: &[u8], lengths: &[usize]) -> Result<Vec<Vec<f64>>, StoreError> {
    let expected = lengths
        .iter()
        .try_fold(0usize, |acc, &n| n.checked_mul(8).and_then(|b| acc.checked_add(b)))
        .ok_or_else(|| StoreError::DimMismatch("declared dimensions overflow".into()))?;
    if data.len() < expected {
        return Err(StoreError::Truncated {
            expected,
            found: data.len(),
        });
    }
    if data.len() > expected {
        return Err(StoreError::DimMismatch(format!(
            "{} bytes of parameters follow a header declaring {expected}",
            data.len()
        )));
    }
    let mut chunks = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    Ok(lengths.iter().map(|&n| chunks.by_ref().take(n).collect()).collect())
}

/// Parses a model file image produced by [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<ModelParams, StoreError> {
    let (header, data) = split_header(bytes)?;
    let num_items: usize = header.parse("num_items")?;
    let k: usize = header.parse("k")?;
    if k == 0 {
        return Err(StoreError::DimMismatch("k must be at least 1".into()));
    }
    let emb = num_items
        .checked_mul(k)
        .ok_or_else(|| StoreError::DimMismatch("declared dimensions overflow".into()))?;
    let params = match header.get("kind")? {
        "fism" => {
            let alpha: f64 = header.parse("alpha")?;
            let mut parts = read_blobs(data, &[emb, emb])?.into_iter();
            ModelParams::Fism(FismParams {
                p: Embeddings::from_vec(num_items, k, parts.next().expect("P"))?,
                q: Embeddings::from_vec(num_items, k, parts.next().expect("Q"))?,
                alpha,
            })
        }
        "nais" => {
            let factor: usize = header.parse("attention_factor")?;
            let beta: f64 = header.parse("beta")?;
            let variant: AttentionVariant = header.parse("variant")?;
            if factor == 0 {
                return Err(StoreError::DimMismatch("attention factor must be at least 1".into()));
            }
            let w_len = factor
                .checked_mul(variant.input_dim(k))
                .ok_or_else(|| StoreError::DimMismatch("declared dimensions overflow".into()))?;
            let mut parts = read_blobs(data, &[emb, emb, w_len, factor, factor])?.into_iter();
            let mut next = || parts.next().expect("blob");
            ModelParams::Nais(NaisParams {
                p: Embeddings::from_vec(num_items, k, next())?,
                q: Embeddings::from_vec(num_items, k, next())?,
                net: AttentionNet {
                    variant,
                    w: next(),
                    b: next(),
                    h: next(),
                },
                beta,
            })
        }
        other => return Err(StoreError::Header(format!("unknown model kind {other:?}"))),
    };
    params.validate()?;
    Ok(params)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}
