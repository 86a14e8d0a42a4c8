//! Run-directory layout and the lock guarding it.
//!
//! ```text
//! run/
//!   config.json
//!   run.lock            (held while a command mutates the run)
//!   input.wav           (the fixed training input x)
//!   dataset.json
//!   labels/             (round<r>_req<id>.wav outputs)
//!   rounds/r<NN>/       (round.json, proposals.json, acquisition.csv, dataset.json snapshot)
//!   models/             (final_round<r>.ampmodel, final.ampmodel, ensembles per study)
//!   reports/            (eval.csv, ablation CSVs, histograms)
//!   exchange/           (request manifests + input copies for manual labeling)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory {0} is locked by another process (remove run.lock if stale)")]
    Locked(String),
    #[error("run directory {0} has no config.json (run `init` first)")]
    NotInitialized(String),
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn input_path(&self) -> PathBuf {
        self.root.join("input.wav")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn round_dir(&self, round: u32) -> PathBuf {
        self.root.join("rounds").join(format!("r{round:02}"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn exchange_dir(&self) -> PathBuf {
        self.root.join("exchange")
    }

    pub fn checkpoint_model_path(&self, round: u32) -> PathBuf {
        self.models_dir().join(format!("final_round{round}.ampmodel"))
    }

    pub fn final_model_path(&self) -> PathBuf {
        self.models_dir().join("final.ampmodel")
    }

    pub fn ensure_layout(&self) -> Result<(), RunDirError> {
        for dir in [
            self.root.clone(),
            self.labels_dir(),
            self.root.join("rounds"),
            self.models_dir(),
            self.reports_dir(),
        ] {
            fs::create_dir_all(&dir).map_err(|source| RunDirError::Io { path: dir.display().to_string(), source })?;
        }
        Ok(())
    }

    pub fn require_initialized(&self) -> Result<(), RunDirError> {
        if !self.config_path().exists() {
            return Err(RunDirError::NotInitialized(self.root.display().to_string()));
        }
        Ok(())
    }

    /// Take the run lock; released when the guard drops.
    pub fn lock(&self) -> Result<RunLock, RunDirError> {
        let path = self.root.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(RunDirError::Locked(self.root.display().to_string()))
            }
            Err(source) => Err(RunDirError::Io { path: path.display().to_string(), source }),
        }
    }
}

pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
