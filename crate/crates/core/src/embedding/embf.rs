//! EMBF v1 reader and writer.
//!
//! Layout: `manifest.json` plus `payload.bin`, stored either in a directory or
//! in a zip archive. The payload is `count * dim` little-endian `f32` values,
//! row-major in record order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, EmbeddingSet, SetKind};
use crate::archive::{f32le_bytes, f32le_values, read_entries, write_entries};
use crate::error::{Error, Result};

pub const EMBF_FORMAT: &str = "EMBF";
pub const EMBF_VERSION: u32 = 1;
const DTYPE: &str = "f32le";
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "payload.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
    dtype: String,
    kind: SetKind,
    class_vocab: Vec<String>,
    attribute_vocab: Vec<String>,
    records: Vec<RecordMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attribute_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

pub fn save_embedding_set(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        format: EMBF_FORMAT.into(),
        version: EMBF_VERSION,
        dim: set.dim(),
        count: set.len(),
        dtype: DTYPE.into(),
        kind: set.kind(),
        class_vocab: set.class_vocab().to_vec(),
        attribute_vocab: set.attribute_vocab().to_vec(),
        records: set
            .records()
            .iter()
            .map(|r| RecordMeta {
                id: r.id.clone(),
                class_label: r.class_label,
                attribute_label: r.attribute_label,
                template_id: r.template_id.clone(),
                text: r.text.clone(),
            })
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json {
        path: path.join(MANIFEST),
        source,
    })?;
    json.push(b'\n');
    let payload = f32le_bytes(set.records().iter().flat_map(|r| r.vector.iter().copied()));
    write_entries(path, &[(MANIFEST, &json), (PAYLOAD, &payload)])
}

pub fn load_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut entries = read_entries(path, &[MANIFEST, PAYLOAD])?;
    let payload = entries.pop().unwrap_or_default();
    let manifest_bytes = entries.pop().unwrap_or_default();

    let malformed = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| malformed(e.to_string()))?;
    if manifest.format != EMBF_FORMAT {
        return Err(malformed(format!(
            "format is `{}`, expected `{EMBF_FORMAT}`",
            manifest.format
        )));
    }
    if manifest.version != EMBF_VERSION {
        return Err(malformed(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != DTYPE {
        return Err(malformed(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    if manifest.dim == 0 {
        return Err(malformed("dim must be positive".into()));
    }
    if manifest.count != manifest.records.len() {
        return Err(malformed(format!(
            "count is {} but {} records are listed",
            manifest.count,
            manifest.records.len()
        )));
    }
    let expected = manifest
        .count
        .checked_mul(manifest.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed("count * dim overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            path: path.join(PAYLOAD),
            expected,
            found: payload.len(),
        });
    }

    let mut values = f32le_values(&payload);
    let records = manifest
        .records
        .into_iter()
        .map(|meta| EmbeddingRecord {
            id: meta.id,
            vector: values.by_ref().take(manifest.dim).collect(),
            class_label: meta.class_label,
            attribute_label: meta.attribute_label,
            template_id: meta.template_id,
            text: meta.text,
        })
        .collect();
    EmbeddingSet::new(
        manifest.kind,
        manifest.dim,
        manifest.class_vocab,
        manifest.attribute_vocab,
        records,
    )
}

/// Imports a hand-written CSV fixture with header `id,class,attribute,template,v0,...`.
///
/// Class and attribute columns hold names; the vocabularies are built in order of
/// first appearance. Empty cells mean "absent".
pub fn load_embedding_csv(path: impl AsRef<Path>, kind: SetKind) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let fixed = ["id", "class", "attribute", "template"];
    if header.len() <= fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(Error::invalid(format!(
            "{}: header must start with id,class,attribute,template followed by v0..v{{d-1}}",
            path.display()
        )));
    }
    let dim = header.len() - fixed.len();
    for (j, h) in header.iter().skip(fixed.len()).enumerate() {
        if h != format!("v{j}") {
            return Err(Error::invalid(format!(
                "{}: expected column `v{j}`, found `{h}`",
                path.display()
            )));
        }
    }

    let mut class_vocab: Vec<String> = Vec::new();
    let mut attribute_vocab: Vec<String> = Vec::new();
    let intern = |vocab: &mut Vec<String>, name: &str| -> Option<usize> {
        if name.is_empty() {
            return None;
        }
        Some(vocab.iter().position(|v| v == name).unwrap_or_else(|| {
            vocab.push(name.to_string());
            vocab.len() - 1
        }))
    };

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let id = row[0].to_string();
        let vector = row
            .iter()
            .skip(fixed.len())
            .enumerate()
            .map(|(j, cell)| {
                cell.parse::<f64>().map_err(|_| Error::InvalidRecord {
                    id: id.clone(),
                    msg: format!("component {j} (`{cell}`) is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let template = (!row[3].is_empty()).then(|| row[3].to_string());
        records.push(EmbeddingRecord {
            class_label: intern(&mut class_vocab, &row[1]),
            attribute_label: intern(&mut attribute_vocab, &row[2]),
            template_id: template,
            text: None,
            vector,
            id,
        });
    }
    EmbeddingSet::new(kind, dim, class_vocab, attribute_vocab, records)
}
