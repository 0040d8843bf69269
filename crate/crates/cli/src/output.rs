//! Atomic report files.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{RunConfig, SCHEMA_VERSION};

/// Writes `path` through a temporary file in the same directory, so the
/// final name only ever refers to a complete file.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a RunConfig,
    report: &'a R,
}

pub struct Sink<'a> {
    pub dir: PathBuf,
    pub stem: String,
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub written: Vec<PathBuf>,
}

impl Sink<'_> {
    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }

    pub fn json<R: Serialize>(&mut self, report: &R) -> io::Result<()> {
        let env = Envelope { schema_version: SCHEMA_VERSION, command: self.command, config: self.config, report };
        let text = serde_json::to_string_pretty(&env).map_err(io::Error::other)?;
        let p = self.path(".json");
        write_atomic(&p, |w| {
            w.write_all(text.as_bytes())?;
            w.write_all(b"\n")
        })?;
        self.written.push(p);
        Ok(())
    }

    pub fn file(&mut self, suffix: &str, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
        let p = self.path(suffix);
        write_atomic(&p, fill)?;
        self.written.push(p);
        Ok(())
    }
}
