//! Output plumbing: overwrite guards, JSON artifacts and the progress log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use slotlpr_core::trainer::StepLog;

/// Refuses to replace an existing file or non-empty directory unless forced.
pub fn guard(path: &Path, force: bool) -> Result<()> {
    let occupied = match std::fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => path.exists(),
    };
    if occupied && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `ckpt/run.bin` becomes `ckpt/run.<suffix>`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

/// One JSON line per optimizer step, plus a periodic human-readable line
/// on stderr. The first write error is kept and reported by `finish`.
pub struct ProgressLog {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
    every: u64,
}

impl ProgressLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            error: None,
            every: 50,
        })
    }

    pub fn record(&mut self, s: &StepLog) {
        if s.step.is_multiple_of(self.every) || s.step == 1 {
            log::info!(
                "mode {} step {} lr {:.3e} loss {:.4}",
                s.mode,
                s.step,
                s.lr,
                s.loss
            );
        }
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(s).expect("step log serialises");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        if let Some(e) = self.error.take() {
            return Err(e).with_context(|| format!("writing {}", self.path.display()));
        }
        self.out
            .flush()
            .with_context(|| format!("writing {}", self.path.display()))?;
        Ok(self.path)
    }
}
