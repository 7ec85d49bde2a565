//! Locating and loading trajectory datasets from disk.
//!
//! A data directory holds one annotation file per scene, named
//! `<scene>.txt` with whitespace-separated `frame ped x y` rows. The
//! stem doubles as the scene name, so leave-one-out benchmarks address
//! scenes by file name (`eth`, `hotel`, `univ`, `zara1`, `zara2`).

use std::path::{Path, PathBuf};

use socprob_core::trajectory::{parse_dataset, Scene};

use crate::error::{CliError, Result};
use crate::fsutil;

/// Environment variable consulted when no `--data` flag is given.
pub const DATA_ENV: &str = "SOCPROB_DATA";

/// Picks the data directory: explicit flag first, then the environment.
pub fn resolve_data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir.to_path_buf());
    }
    match std::env::var_os(DATA_ENV) {
        Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
        _ => Err(CliError::usage(format!(
            "no data directory: pass --data <DIR> or set {DATA_ENV}"
        ))),
    }
}

/// Loads a single annotation file; the file stem names the scene.
pub fn load_scene_file(path: &Path) -> Result<Scene> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::format(path, "file name does not yield a scene name"))?
        .to_owned();
    let text = fsutil::read_text(path)?;
    parse_dataset(&name, &text).map_err(|e| CliError::format(path, e.to_string()))
}

/// Loads every `*.txt` scene in a directory, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<Scene>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|ext| ext == "txt") && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::format(dir, "no *.txt scene files"));
    }
    files.iter().map(|p| load_scene_file(p)).collect()
}

/// Finds a scene by name, or lists what is available.
pub fn select_scene<'a>(scenes: &'a [Scene], name: &str) -> Result<&'a Scene> {
    scenes.iter().find(|s| s.name == name).ok_or_else(|| {
        let known: Vec<&str> = scenes.iter().map(|s| s.name.as_str()).collect();
        CliError::usage(format!(
            "unknown scene '{name}' (available: {})",
            known.join(", ")
        ))
    })
}
