//! Atomic file output with embedded run configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::CliError;
use crate::data::{write_score_table, ScoreTable, TableFormat};

/// Writes `bytes` to a temporary sibling file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Output(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Path of the configuration sidecar that accompanies a JSONL output.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    path.with_file_name(name)
}

/// Writes a score table. CSV output carries the config as leading `#`
/// comment lines; JSONL output gets a `.config.json` sidecar.
pub fn write_table(path: &Path, table: &ScoreTable, config: &serde_json::Value) -> Result<(), CliError> {
    let format = TableFormat::from_path(path)
        .ok_or_else(|| CliError::Usage(format!("{}: output must end in .csv or .jsonl", path.display())))?;
    let mut buf = Vec::new();
    if format == TableFormat::Csv {
        writeln!(buf, "# toolkit_version: {}", crate::VERSION).map_err(|e| CliError::Internal(e.to_string()))?;
        writeln!(buf, "# config: {config}").map_err(|e| CliError::Internal(e.to_string()))?;
    }
    write_score_table(table, &mut buf, format)?;
    write_atomic(path, &buf)?;
    if format == TableFormat::Jsonl {
        write_json(&sidecar_path(path), &envelope(config))?;
    }
    Ok(())
}

/// Provenance header shared by every JSON output.
pub fn envelope(config: &serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "toolkit_version": crate::VERSION,
        "config": config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("a/b.jsonl")), PathBuf::from("a/b.jsonl.config.json"));
    }
}
