use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RawInteraction;
use crate::error::{Error, Result};

/// Column names for the user, item and timestamp fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub user: String,
    pub item: String,
    pub timestamp: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            item: "item_id".into(),
            timestamp: "timestamp".into(),
        }
    }
}

/// Reads a headed, comma-separated UTF-8 file in file order.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<RawInteraction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);

    let headers = {
        let h = reader.headers()?;
        h.clone()
    };
    if headers.is_empty() {
        log::warn!("{}: empty file", path.display());
        return Ok(Vec::new());
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name:?}", path.display())))
    };
    let (u, i, t) = (
        column(&schema.user)?,
        column(&schema.item)?,
        column(&schema.timestamp)?,
    );

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| {
            record.get(idx).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("missing field {idx}"),
            })
        };
        let ts_raw = field(t)?.trim();
        let timestamp = ts_raw.parse::<i64>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("timestamp {ts_raw:?} is not an integer"),
        })?;
        out.push(RawInteraction {
            user_id: field(u)?.trim().to_string(),
            item_id: field(i)?.trim().to_string(),
            timestamp,
        });
    }
    if out.is_empty() {
        log::warn!("{}: no interactions", path.display());
    }
    Ok(out)
}

/// Writes interactions with the given column names, in slice order.
pub fn write_csv(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    rows: &[RawInteraction],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([&schema.user, &schema.item, &schema.timestamp])?;
    for r in rows {
        w.write_record([
            r.user_id.as_str(),
            r.item_id.as_str(),
            &r.timestamp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
