//! Pipeline commands behind the `depth-introspect` binary.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

pub use commands::*;
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing {what} at {}; {hint}", path.display())]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },
    #[error(transparent)]
    Core(#[from] depth_introspect::Error),
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for invalid configuration or inputs, 2 for runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        use depth_introspect::Error as E;
        match self {
            CliError::Config(_) | CliError::MissingArtifact { .. } => 1,
            CliError::Core(
                E::InvalidConfig(_)
                | E::DimensionMismatch { .. }
                | E::ViewCount { .. }
                | E::InvalidInput(_),
            ) => 1,
            CliError::Core(_) | CliError::Output { .. } => 2,
        }
    }
}

/// Where each command reads and writes under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dataset().join("manifest.jsonl")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn detections(&self) -> PathBuf {
        self.root.join("detect")
    }

    pub fn corrected(&self) -> PathBuf {
        self.root.join("corrected")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline")
    }
}

/// Files of a trained (or pretrained) model directory.
#[derive(Clone, Debug)]
pub struct ModelFiles {
    pub dir: PathBuf,
}

impl ModelFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn metadata(&self) -> PathBuf {
        self.dir.join("model.json")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.dir.join("pretrained.ckpt")
    }

    pub fn pretrain_curve(&self) -> PathBuf {
        self.dir.join("pretrain_curve.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn require(path: &Path, what: &'static str, hint: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what,
            path: path.to_path_buf(),
            hint,
        })
    }
}
