use std::collections::BTreeSet;

use super::{SopDoc, SopError};

/// Parse one SOP document (TOML) into a [`SopDoc`].
///
/// Syntax errors are reported as [`SopError::MalformedDocument`] with a
/// 1-based line and column; missing or mistyped fields and duplicate step
/// indices as [`SopError::SchemaViolation`] with the field path.
pub fn parse_sop(bytes: &[u8]) -> Result<SopDoc, SopError> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let (line, column) = line_col(bytes, e.valid_up_to());
        SopError::MalformedDocument {
            line,
            column,
            message: format!("invalid UTF-8: {e}"),
        }
    })?;

    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e
            .span()
            .map(|s| line_col(text.as_bytes(), s.start))
            .unwrap_or((1, 1));
        SopError::MalformedDocument {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let doc: SopDoc =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let field = e.path().to_string();
            SopError::SchemaViolation {
                field: if field == "." { "<root>".into() } else { field },
                message: e.into_inner().to_string(),
            }
        })?;

    let mut seen = BTreeSet::new();
    for (pos, step) in doc.steps.iter().enumerate() {
        if !seen.insert(step.index) {
            return Err(SopError::SchemaViolation {
                field: format!("steps[{pos}].index"),
                message: format!("duplicate step index {}", step.index),
            });
        }
    }
    Ok(doc)
}

/// Serialize a document back into the SOP file format. `parse_sop` of the
/// output reproduces `doc` field for field.
pub fn serialize_sop(doc: &SopDoc) -> String {
    toml::to_string(doc).expect("SopDoc always serializes to TOML")
}

fn line_col(bytes: &[u8], offset: usize) -> (usize, usize) {
    let upto = &bytes[..offset.min(bytes.len())];
    let line = upto.iter().filter(|&&b| b == b'\n').count() + 1;
    let column = upto.iter().rev().take_while(|&&b| b != b'\n').count() + 1;
    (line, column)
}
