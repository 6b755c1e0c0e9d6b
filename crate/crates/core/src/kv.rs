//! Line-oriented `key=value` text used by manifests, configs and reports.

use std::collections::BTreeMap;

use crate::error::{DuplexError, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are skipped;
/// keys must be unique.
pub fn parse(text: &str, file: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(DuplexError::Parse {
                file: file.to_string(),
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(DuplexError::Parse {
                file: file.to_string(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(DuplexError::Parse {
                file: file.to_string(),
                line: i + 1,
                msg: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(out)
}
