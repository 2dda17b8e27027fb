//! Run directories: lockfile, materialized config, log and JSON report.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::container::write_file;

/// A run directory owned by this process until dropped.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub config_digest: String,
    log: File,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `path`, takes `run.lock` and writes `config.json`. Fails if
    /// another process holds the lock.
    pub fn open(path: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join("run.lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("{} is locked by another run", path.display()))
            } else {
                Error::io(&lock, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&lock, e))?;
        write_file(&path.join("config.json"), config.to_json().as_bytes())?;
        let log_path = path.join("run.log");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            config_digest: config.digest(),
            log,
            lock,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn log(&mut self, line: &str) {
        log::info!("{line}");
        // a failed log write must not abort a run
        let _ = writeln!(self.log, "{line}");
    }

    /// Writes `report.json` with the config digest merged in.
    pub fn write_report<T: Serialize>(&self, report: &T) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(report)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("config_digest".into(), self.config_digest.clone().into());
        }
        write_file(&self.file("report.json"), serde_json::to_string_pretty(&v)?.as_bytes())?;
        Ok(v)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let run = RunDir::open(dir.path(), &cfg).unwrap();
        assert_eq!(RunDir::open(dir.path(), &cfg).unwrap_err().exit_code(), 2);
        let v = run.write_report(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(v["config_digest"], cfg.digest());
        drop(run);
        let stored = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
        assert_eq!(RunConfig::from_json(&stored).unwrap(), cfg);
        RunDir::open(dir.path(), &cfg).unwrap();
    }
}
