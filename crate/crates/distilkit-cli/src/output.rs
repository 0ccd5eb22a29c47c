//! Output directory handling. Text outputs start with `# ` header lines;
//! binary model files are listed with the header in `manifest.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;

use distilkit::config::{config_hash, header_lines};

pub struct Run {
    pub dir: PathBuf,
    pub header: Vec<String>,
    files: Vec<String>,
}

impl Run {
    pub fn start<C: Serialize>(out: &std::path::Path, command: &str, cfg: &C, seed: u64) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out)?;
        let hash = config_hash(cfg)?;
        let run = Run {
            dir: out.to_path_buf(),
            header: header_lines(command, &hash, seed),
            files: Vec::new(),
        };
        let mut f = File::create(run.dir.join("config.json"))?;
        serde_json::to_writer_pretty(&mut f, cfg)?;
        writeln!(f)?;
        Ok(run)
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn csv<R: AsRef<[String]>>(&mut self, name: &str, columns: &[&str], rows: &[R]) -> anyhow::Result<()> {
        let mut f = BufWriter::new(File::create(self.path(name))?);
        for h in &self.header {
            writeln!(f, "# {h}")?;
        }
        let mut w = csv::Writer::from_writer(f);
        w.write_record(columns)?;
        for r in rows {
            w.write_record(r.as_ref())?;
        }
        w.flush()?;
        Ok(())
    }

    /// `{"header": [...], "<key>": value}`.
    pub fn json<T: Serialize>(&mut self, name: &str, key: &str, value: &T) -> anyhow::Result<()> {
        let doc = json!({ "header": self.header, key: value });
        let mut f = File::create(self.path(name))?;
        serde_json::to_writer_pretty(&mut f, &doc)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn trace(&mut self, name: &str, rows: &[distilkit::optim::TraceRow]) -> anyhow::Result<()> {
        let path = self.path(name);
        distilkit::optim::write_trace_csv(&path, &self.header, rows)?;
        Ok(())
    }

    pub fn finish(self) -> anyhow::Result<()> {
        let doc = json!({ "header": self.header, "files": self.files });
        let mut f = File::create(self.dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &doc)?;
        writeln!(f)?;
        for name in &self.files {
            println!("wrote {}", self.dir.join(name).display());
        }
        Ok(())
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}
