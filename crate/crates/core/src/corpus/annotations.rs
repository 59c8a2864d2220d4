//! Annotation files: a JSON list of CUHK-PEDES style records
//!
//! ```json
//! [{"file_path": "cam_a/0001.jpg", "id": 1, "split": "train",
//!   "captions": ["a man in a red shirt ...", "..."]}]
//! ```
//!
//! `id` may be a string or an integer and is treated as an opaque label.
//! `file_path` is resolved relative to the annotation file's directory.
//! Unknown fields are ignored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Corpus, ImageSource, RawEntry, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub file_path: String,
    pub id: String,
    pub split: Split,
    pub captions: Vec<String>,
}

fn malformed(index: usize, field: &str) -> Error {
    Error::MalformedRecord { index, field: field.to_string() }
}

fn parse_record(index: usize, value: &Value) -> Result<AnnotationRecord> {
    let obj = value.as_object().ok_or_else(|| malformed(index, "<record>"))?;
    let file_path = obj
        .get("file_path")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| malformed(index, "file_path"))?
        .to_string();
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(malformed(index, "id")),
    };
    let split = obj
        .get("split")
        .and_then(Value::as_str)
        .and_then(Split::parse)
        .ok_or_else(|| malformed(index, "split"))?;
    let captions = obj
        .get("captions")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| malformed(index, "captions"))?
        .iter()
        .map(|c| c.as_str().filter(|s| !s.trim().is_empty()).map(str::to_string))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed(index, "captions"))?;
    Ok(AnnotationRecord { file_path, id, split, captions })
}

/// Parses annotation JSON text into records, naming the first bad record.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let value: Value = serde_json::from_str(text)?;
    let list = value.as_array().ok_or_else(|| Error::Data("annotation file must be a JSON list".into()))?;
    if list.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    list.iter().enumerate().map(|(i, v)| parse_record(i, v)).collect()
}

pub fn ingest_annotations(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let records = parse_annotations(&text)?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let entries = records
        .into_iter()
        .map(|r| RawEntry {
            source: ImageSource::File(root.join(&r.file_path)),
            label: r.id,
            split: r.split,
            file_path: r.file_path,
            captions: r.captions,
        })
        .collect();
    Corpus::from_entries(entries)
}

/// Writes the corpus as an annotation list. Images held in memory are saved
/// as PNG under `dir` at their `file_path`; file-backed images keep their
/// original path.
pub fn write_annotations(corpus: &Corpus, dir: &Path) -> Result<Vec<AnnotationRecord>> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(corpus.images().len());
    for (idx, img) in corpus.images().iter().enumerate() {
        if let ImageSource::Raster(r) = &img.source {
            let target = dir.join(&img.file_path);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            r.save_png(&target)?;
        }
        let captions = corpus.texts().iter().filter(|t| t.pair_id == idx).map(|t| t.caption.clone()).collect();
        records.push(AnnotationRecord {
            file_path: img.file_path.clone(),
            id: corpus.identities()[img.identity].label.clone(),
            split: img.split,
            captions,
        });
    }
    fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&records)?)?;
    Ok(records)
}
