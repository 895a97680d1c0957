use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const OUT_ENV: &str = "CONFNMT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub command: String,
    /// `ok`, or `failed: <message>`.
    pub status: String,
    pub seeds: Vec<u64>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
}

/// Run directory: `explicit`, else `<$CONFNMT_OUT or ./runs>/<name>`.
pub fn resolve(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(name)
        }
    }
}

/// Output directory of one command. Every file under it is listed in the
/// manifest with its checksum when the run finishes.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Checksums every file and writes the manifest.
    pub fn finish(
        &self,
        command: &str,
        status: String,
        seeds: Vec<u64>,
        config: serde_json::Value,
    ) -> Result<Manifest> {
        let mut paths = Vec::new();
        collect(&self.root, &mut paths)?;
        paths.sort();
        let mut files = Vec::new();
        for p in paths {
            let rel = p.strip_prefix(&self.root).expect("collected under root");
            if rel == Path::new(MANIFEST) {
                continue;
            }
            let data = fs::read(&p)?;
            files.push(FileEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: data.len() as u64,
                sha256: hex::encode(Sha256::digest(&data)),
            });
        }
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool: format!("confnmt {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            status,
            seeds,
            config,
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(io::Error::from)?;
        fs::write(self.file(MANIFEST), text + "\n")?;
        Ok(manifest)
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
