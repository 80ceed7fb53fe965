//! File plumbing shared by the subcommands: atomic writes (temp file in the
//! destination directory, then rename) and line-oriented JSONL readers that
//! report the offending line number.

use std::path::Path;

use serde::Serialize;
use serde::de::DeserializeOwned;

use crate::CliError;

/// Write `bytes` to `path` atomically: the content lands in a temp file in
/// the same directory and is renamed into place, so a crash mid-write never
/// leaves a truncated output behind. Parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent)
        .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", parent.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)
        .map_err(|e| CliError::Io(format!("cannot create temp file in '{}': {e}", parent.display())))?;
    std::io::Write::write_all(&mut tmp, bytes)
        .map_err(|e| CliError::Io(format!("cannot write '{}': {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::Io(format!("cannot finalize '{}': {e}", path.display())))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read '{}': {e}", path.display())))
}

/// Parse one JSON value per non-empty line. Parse failures are validation
/// errors tagged with the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| {
            CliError::Validation(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Serialize one JSON object per line and write the whole file atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)
            .map_err(|e| CliError::Io(format!("cannot serialize row for '{}': {e}", path.display())))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Pretty-print a JSON document and write it atomically with a trailing
/// newline, matching what `jq` and most editors expect.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut buf = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Io(format!("cannot serialize '{}': {e}", path.display())))?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}
