use std::sync::Mutex;

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::{build_circuit, select_path, CircuitError, CircuitHandle};
use crate::directory::DirectoryClient;

/// Owns the current circuit and builds replacements with fresh paths.
pub struct CircuitManager {
    directory: DirectoryClient,
    path_len: usize,
    rng: Mutex<StdRng>,
    current: Mutex<Option<CircuitHandle>>,
}

impl CircuitManager {
    /// Path selection draws from an OS-seeded RNG.
    pub fn new(directory: DirectoryClient, path_len: usize) -> Self {
        Self::with_rng(directory, path_len, StdRng::from_entropy())
    }

    pub fn with_rng(directory: DirectoryClient, path_len: usize, rng: StdRng) -> Self {
        CircuitManager {
            directory,
            path_len,
            rng: Mutex::new(rng),
            current: Mutex::new(None),
        }
    }

    pub fn path_len(&self) -> usize {
        self.path_len
    }

    pub fn directory(&self) -> &DirectoryClient {
        &self.directory
    }

    /// Fetch a snapshot, pick a path and build a circuit on it. The manager's
    /// current circuit is left alone.
    pub async fn build_fresh(&self) -> Result<CircuitHandle, CircuitError> {
        if !(super::MIN_PATH_LEN..=super::MAX_PATH_LEN).contains(&self.path_len) {
            return Err(CircuitError::PathLength(self.path_len));
        }
        let snapshot = self.directory.list(None).await?;
        let path = {
            let mut rng = self.rng.lock().expect("rng poisoned");
            select_path(&snapshot, self.path_len, &mut *rng)?
        };
        build_circuit(&path).await
    }

    /// Build a replacement and make it current. The previous circuit is
    /// retired: it takes no new streams and is destroyed once its streams
    /// end. If the build fails the previous circuit stays current.
    pub async fn rotate(&self) -> Result<CircuitHandle, CircuitError> {
        let fresh = self.build_fresh().await?;
        let old = self
            .current
            .lock()
            .expect("circuit slot poisoned")
            .replace(fresh.clone());
        if let Some(old) = old {
            old.retire();
        }
        Ok(fresh)
    }

    /// The current circuit, if one is open.
    pub fn current(&self) -> Option<CircuitHandle> {
        self.current
            .lock()
            .expect("circuit slot poisoned")
            .as_ref()
            .filter(|c| !c.is_closed())
            .cloned()
    }

    /// The current circuit, building one if there is none.
    pub async fn get_or_build(&self) -> Result<CircuitHandle, CircuitError> {
        match self.current() {
            Some(c) => Ok(c),
            None => self.rotate().await,
        }
    }

    /// Destroy the current circuit immediately.
    pub fn shutdown(&self) {
        if let Some(c) = self.current.lock().expect("circuit slot poisoned").take() {
            c.destroy();
        }
    }
}
