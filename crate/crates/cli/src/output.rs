//! Run directories: resolved config, outputs and their content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "hashes.txt";

/// Output root when `--out` is not given.
pub const OUT_ENV: &str = "ERLAB_OUT";

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `out`, or `$ERLAB_OUT/<name>` (default root `runs`).
    pub fn create(out: Option<&Path>, name: &str) -> Result<Self> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from(std::env::var_os(OUT_ENV).unwrap_or_else(|| "runs".into())).join(name),
        };
        fs::create_dir_all(&path).with_context(|| format!("creating output directory {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config<T: Serialize>(&self, config: &T) -> Result<()> {
        let text = toml::to_string(config).context("serializing run config")?;
        let path = self.file(CONFIG_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Hashes every file under the run directory into `hashes.txt`.
    pub fn seal(&self) -> Result<()> {
        let mut files = Vec::new();
        collect_files(&self.path, &mut files)?;
        files.sort();
        let mut out = String::new();
        for f in files {
            let rel = f.strip_prefix(&self.path).unwrap_or(&f);
            if rel == Path::new(HASH_FILE) {
                continue;
            }
            let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
            out.push_str(&format!("{}  {}\n", blob_hash(&bytes), rel.display()));
        }
        let path = self.file(HASH_FILE);
        fs::write(&path, out).with_context(|| format!("writing {}", path.display()))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Git-style object hash: sha256 over `"blob <len>\0" ++ content`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}
