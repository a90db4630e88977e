use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Output directory; every file name is relative to it.
pub struct Out {
    dir: PathBuf,
}

impl Out {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Out { dir: dir.to_path_buf() })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    /// CSV with optional `#` comment lines above the header row.
    pub fn csv<T: Serialize>(&self, name: &str, comments: &[String], rows: &[T]) -> Result<()> {
        let mut w = self.create(name)?;
        for line in comments {
            writeln!(w, "# {line}")?;
        }
        let mut csv = csv::Writer::from_writer(w);
        for row in rows {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn jsonl<T: Serialize>(&self, name: &str, lines: &[T]) -> Result<()> {
        let mut w = self.create(name)?;
        for line in lines {
            serde_json::to_writer(&mut w, line)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn text(&self, name: &str, body: &str) -> Result<()> {
        let mut w = self.create(name)?;
        w.write_all(body.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}
