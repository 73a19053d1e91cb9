//! CSV output shared by the training, adaptation and evaluation stages.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `rows` with a header derived from the row type's field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
