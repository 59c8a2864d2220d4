//! Output paths, the per-directory lock and cleanup of partial artifacts.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

/// Relative output paths are placed under this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "PROPOT_OUTPUT_ROOT";
pub const LOCK_FILE: &str = ".propot.lock";

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::data(format!(
                "output directory {} is locked by another invocation (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::data(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Tracks what an invocation creates and deletes it again unless the
/// invocation calls [`Outputs::commit`].
#[derive(Debug, Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
    keep: Vec<PathBuf>,
    committed: bool,
    locks: Vec<DirLock>,
}

impl Outputs {
    /// Creates `dir` (and parents) when missing and locks it. Only a
    /// directory that did not exist before is removed on failure.
    pub fn directory(&mut self, dir: &Path) -> Result<(), CliError> {
        if !dir.exists() {
            let mut top = dir.to_path_buf();
            while let Some(parent) = top.parent() {
                if parent.as_os_str().is_empty() || parent.exists() {
                    break;
                }
                top = parent.to_path_buf();
            }
            fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
            self.created.push(top);
        }
        if !self.locks.iter().any(|l| l.path == dir.join(LOCK_FILE)) {
            self.locks.push(DirLock::acquire(dir)?);
        }
        Ok(())
    }

    /// Prepares the parent directory of an output file.
    pub fn file(&mut self, path: &Path) -> Result<(), CliError> {
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        self.directory(parent)?;
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        Ok(())
    }

    /// Survives cleanup, such as a diagnostic dump.
    pub fn keep(&mut self, path: PathBuf) {
        self.keep.push(path);
    }

    pub fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        self.locks.clear();
        if self.committed {
            return;
        }
        for path in self.created.iter().rev() {
            if self.keep.iter().any(|k| k.starts_with(path)) {
                if path.is_dir() {
                    remove_dir_except(path, &self.keep);
                }
                continue;
            }
            let _ = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
        }
    }
}

fn remove_dir_except(dir: &Path, keep: &[PathBuf]) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if keep.iter().any(|k| k == &path) {
            continue;
        }
        if keep.iter().any(|k| k.starts_with(&path)) {
            remove_dir_except(&path, keep);
        } else if path.is_dir() {
            let _ = fs::remove_dir_all(&path);
        } else {
            let _ = fs::remove_file(&path);
        }
    }
}

/// Writes through a temporary sibling so a failed write leaves nothing.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// `sha256  relative/path` lines for the given files, in order.
pub fn checksum_manifest(dir: &Path, files: &[PathBuf]) -> Result<String, CliError> {
    let mut out = String::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| CliError::data(format!("cannot read {}: {e}", f.display())))?;
        let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        let rel = f.strip_prefix(dir).unwrap_or(f);
        out.push_str(&format!("{digest}  {}\n", rel.display()));
    }
    Ok(out)
}
