use std::future::Future;
use std::sync::{Arc, Mutex};

use tokio::task::AbortHandle;

/// Remembers spawned tasks so a component can be torn down as a unit.
#[derive(Debug, Clone, Default)]
pub(crate) struct TaskTracker {
    handles: Arc<Mutex<Vec<AbortHandle>>>,
}

impl TaskTracker {
    pub fn spawn<F>(&self, fut: F) -> AbortHandle
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let handle = tokio::spawn(fut).abort_handle();
        let mut handles = self.handles.lock().expect("task list poisoned");
        if handles.len() >= 256 {
            handles.retain(|h| !h.is_finished());
        }
        handles.push(handle.clone());
        handle
    }

    pub fn abort_all(&self) {
        for h in self.handles.lock().expect("task list poisoned").drain(..) {
            h.abort();
        }
    }
}
