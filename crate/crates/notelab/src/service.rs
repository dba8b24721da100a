//! Ownership of spawned server tasks.

use std::net::SocketAddr;

use tokio::task::{JoinHandle, JoinSet};

/// Aborts the task when dropped.
#[derive(Debug)]
pub struct AbortOnDrop(pub JoinHandle<()>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        self.0.abort();
    }
}

/// A listening service. Dropping it or calling [`Service::shutdown`] stops
/// the accept loop and every connection it spawned.
#[derive(Debug)]
pub struct Service {
    local_addr: SocketAddr,
    task: Option<AbortOnDrop>,
}

impl Service {
    pub fn new(local_addr: SocketAddr, task: JoinHandle<()>) -> Self {
        Service { local_addr, task: Some(AbortOnDrop(task)) }
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn is_running(&self) -> bool {
        self.task.as_ref().is_some_and(|t| !t.0.is_finished())
    }

    pub async fn shutdown(&mut self) {
        if let Some(mut t) = self.task.take() {
            t.0.abort();
            let _ = (&mut t.0).await;
        }
    }
}

/// Connection tasks owned by an accept loop; aborted with it.
pub type Connections = JoinSet<()>;

/// Drops finished connection tasks so the set does not grow unbounded.
pub fn reap(conns: &mut Connections) {
    while conns.try_join_next().is_some() {}
}
