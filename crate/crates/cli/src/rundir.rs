use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use fgdiff::Result;

use crate::config::RunConfig;

/// Claims a fresh `<parent>/<timestamp>-<command>` directory. A numeric
/// suffix is added when two invocations land in the same second, so an
/// existing directory is never reused.
pub fn create(parent: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(parent)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{command}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = parent.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded suffix search")
}

pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
    Ok(())
}
