use super::HarnessError;
use crate::backends::ImageRef;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    /// 1-based line in the source file.
    #[serde(skip)]
    pub line: usize,
}

pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>, HarnessError> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut record: DatasetRecord =
            serde_json::from_str(raw).map_err(|e| HarnessError::Parse {
                line,
                message: e.to_string(),
            })?;
        record.line = line;
        if seen.insert(record.id.clone(), line).is_some() {
            return Err(HarnessError::DuplicateId {
                line,
                id: record.id,
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    Ok(records)
}

pub fn ingest_dataset(path: &Path) -> Result<Vec<DatasetRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_dataset(&text)
}
