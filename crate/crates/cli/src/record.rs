//! Stage manifests. Each completed stage leaves `stages/<name>.csv` under
//! the output root listing the configuration digest, a few summary values
//! and the SHA-256 of every file it produced. A stage whose manifest is
//! present and whose files still hash the same is complete.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use crate::stages::Stage;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Every regular file under `dir`, sorted, relative to `base`.
pub fn files_under(dir: &Path, base: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("cannot list {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(base).expect("walk stays under base").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn portable(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub config: String,
    pub values: Vec<(String, String)>,
    /// Output-root-relative path and digest of every output.
    pub files: Vec<(String, String)>,
}

impl StageRecord {
    pub fn new(stage: Stage, config: String) -> Self {
        Self {
            stage,
            config,
            values: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn value(&mut self, key: impl Into<String>, value: impl ToString) {
        self.values.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Hashes `path` (relative to `out`) into the record.
    pub fn file(&mut self, out: &Path, rel: &Path) -> Result<()> {
        let digest = sha256_file(&out.join(rel))?;
        self.files.push((portable(rel), digest));
        Ok(())
    }

    pub fn tree(&mut self, out: &Path, dir_rel: &Path) -> Result<()> {
        for rel in files_under(&out.join(dir_rel), out)? {
            self.file(out, &rel)?;
        }
        Ok(())
    }

    pub fn path(out: &Path, stage: Stage) -> PathBuf {
        out.join("stages").join(format!("{}.csv", stage.as_str()))
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = Self::path(out, self.stage);
        fs::create_dir_all(path.parent().expect("stage path has a parent"))?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["kind", "key", "value"])?;
        w.write_record(["meta", "stage", self.stage.as_str()])?;
        w.write_record(["meta", "config", self.config.as_str()])?;
        for (k, v) in &self.values {
            w.write_record(["value", k, v])?;
        }
        for (k, v) in &self.files {
            w.write_record(["file", k, v])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(out: &Path, stage: Stage) -> Result<Self> {
        let path = Self::path(out, stage);
        let mut r = csv::Reader::from_path(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut rec = Self::new(stage, String::new());
        for row in r.records() {
            let row = row?;
            match (&row[0], &row[1]) {
                ("meta", "stage") if &row[2] == stage.as_str() => {}
                ("meta", "stage") => bail!("{} belongs to stage `{}`", path.display(), &row[2]),
                ("meta", "config") => rec.config = row[2].to_owned(),
                ("value", k) => rec.values.push((k.to_owned(), row[2].to_owned())),
                ("file", k) => rec.files.push((k.to_owned(), row[2].to_owned())),
                _ => bail!("{}: unexpected row {:?}", path.display(), row),
            }
        }
        Ok(rec)
    }

    /// True when the record was written for `config` and every listed file
    /// still has its recorded digest.
    pub fn is_current(&self, out: &Path, config: &str) -> bool {
        self.config == config
            && self
                .files
                .iter()
                .all(|(rel, digest)| sha256_file(&out.join(rel)).is_ok_and(|d| &d == digest))
    }
}
