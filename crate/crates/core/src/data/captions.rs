//! Offline caption files: one JSON object per line, `{"id": …, "caption": …}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{AttackSubtype, Label, SyntheticSample};
use crate::error::{CcpeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
}

/// Caption record plus the sample metadata, as written by dataset export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub id: String,
    pub caption: String,
    pub label: Label,
    pub domain: String,
    pub subtype: AttackSubtype,
    pub raw: Vec<f64>,
}

pub fn load_captions(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| CcpeError::io(path, e))?;
    parse_captions(&text)
}

/// Parses caption records. Blank lines are skipped; a repeated id keeps the
/// last record.
pub fn parse_captions(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(line).map_err(|e| CcpeError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if map.insert(record.id.clone(), record.caption).is_some() {
            log::warn!("duplicate caption id `{}` on line {}; keeping the later record", record.id, i + 1);
        }
    }
    Ok(map)
}

pub fn write_captions<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    let mut out = Vec::new();
    for (id, caption) in records {
        let record = CaptionRecord {
            id: id.to_string(),
            caption: caption.to_string(),
        };
        serde_json::to_writer(&mut out, &record).expect("caption records serialize");
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn export_dataset(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        let record = ExportRecord {
            id: s.id.clone(),
            caption: s.caption.clone(),
            label: s.label,
            domain: s.domain.clone(),
            subtype: s.attack_subtype,
            raw: s.raw.clone(),
        };
        serde_json::to_writer(&mut out, &record).expect("export records serialize");
        out.push(b'\n');
    }
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CcpeError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CcpeError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CcpeError::io(path, e))
}

/// Replaces sample captions with those found in `captions`; samples without
/// an entry keep their templated caption. Returns how many fell back.
pub fn apply_captions(samples: &mut [SyntheticSample], captions: &BTreeMap<String, String>) -> usize {
    let mut missing = 0;
    for s in samples.iter_mut() {
        match captions.get(&s.id) {
            Some(c) => s.caption = c.clone(),
            None => missing += 1,
        }
    }
    if missing > 0 {
        log::warn!("{missing} samples have no offline caption; using templated captions");
    }
    missing
}
