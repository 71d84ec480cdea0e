use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

const LOCK: &str = ".lock";

/// Output directory held for one run. Creating it takes `DIR/.lock`; the
/// lock is released on drop. Outputs are never overwritten.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, outputs: &[&str]) -> Result<RunDir> {
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("{} is locked by another run (remove {} if stale)", path.display(), lock.display()))?;
        let dir = RunDir { path: path.to_path_buf() };
        for name in outputs.iter().chain(&["run_config.json"]) {
            if path.join(name).exists() {
                bail!("{} already holds {name}; choose a fresh output directory", path.display());
            }
        }
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, body: &str) -> Result<()> {
        let p = self.path.join(name);
        if p.exists() {
            bail!("refusing to overwrite {}", p.display());
        }
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join(LOCK));
    }
}

/// Prints a one-line JSON error record to stderr and, when the output
/// directory exists, writes it to `DIR/error.json`.
pub fn report_error(err: &anyhow::Error, usage: bool, out: Option<&Path>) {
    let record = serde_json::json!({
        "error": if usage { "usage" } else { "runtime" },
        "message": err.to_string(),
        "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    });
    eprintln!("{record}");
    if let Some(dir) = out.filter(|d| d.is_dir()) {
        let _ = std::fs::write(dir.join("error.json"), record.to_string() + "\n");
    }
}
