//! Output files. Each one starts with a `#` line carrying the engine
//! version, the command, the seed and the hash of the effective config, so
//! that any artifact can be traced back to the run that produced it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::failure::Failure;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct RunMeta {
    pub command: &'static str,
    pub seed: u64,
    pub config_sha256: String,
}

impl RunMeta {
    pub fn new(command: &'static str, cfg: &RunConfig) -> Self {
        let json = serde_json::to_vec(cfg).expect("config serializes");
        let digest = Sha256::digest(&json);
        Self {
            command,
            seed: cfg.seed,
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# swing {VERSION} command={} seed={} config_sha256={}\n",
            self.command, self.seed, self.config_sha256
        )
    }
}

pub struct OutDir {
    dir: PathBuf,
    meta: RunMeta,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: &Path, meta: RunMeta) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            written: Vec::new(),
        })
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }

    /// Opens `name` with the metadata line already written.
    pub fn open(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| Failure::Data(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.meta.header().as_bytes())?;
        self.written.push(path);
        Ok(w)
    }

    /// CSV writer on a fresh artifact.
    pub fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>, Failure> {
        Ok(csv::Writer::from_writer(self.open(name)?))
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

/// Fixed-precision float formatting for CSV cells.
pub fn f(x: f64) -> String {
    format!("{x:.10}")
}
