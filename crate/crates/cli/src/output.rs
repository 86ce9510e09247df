//! Guarded output files and the run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// `dir/stem.csv` -> `dir/stem.<tag>.csv`.
pub fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}.{tag}.{ext}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

/// Refuses to proceed if any output already exists and `force` is off.
pub fn check_outputs(paths: &[&Path], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::Exists(p.to_path_buf())),
        None => Ok(()),
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes through a buffer and flushes, mapping failures to I/O errors.
pub fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> invicl_core::Result<()>,
) -> Result<(), CliError> {
    let mut w = create(path)?;
    body(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
pub struct Manifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config: C,
    pub artifacts: Vec<PathBuf>,
    pub started: String,
    pub finished: Option<String>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &str, seed: Option<u64>, config: C, artifacts: Vec<PathBuf>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            seed,
            config,
            artifacts,
            started: now(),
            finished: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, |w| Ok(serde_json::to_writer_pretty(&mut *w, self)?))
    }

    pub fn finish(&mut self, path: &Path) -> Result<(), CliError> {
        self.finished = Some(now());
        self.write(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("out/curve.csv"), "probe"), PathBuf::from("out/curve.probe.csv"));
        assert_eq!(sibling(Path::new("ck"), "loss"), PathBuf::from("ck.loss"));
    }

    #[test]
    fn existing_outputs_need_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "x").unwrap();
        assert!(check_outputs(&[&p], false).is_err());
        assert!(check_outputs(&[&p], true).is_ok());
    }
}
