//! Bulk-synchronous execution of per-agent work.
//!
//! Every protocol round runs one closure per agent and joins before the next
//! round starts. The threaded scheduler runs the closures on scoped threads;
//! since each closure only reads the previous round's state, both schedulers
//! produce bit-identical results.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    #[default]
    Sequential,
    Threaded,
}

impl Scheduler {
    /// Runs `f(i)` for every agent `i < agents` and collects the results in
    /// agent order.
    pub fn map<T, F>(self, agents: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        match self {
            Scheduler::Sequential => (0..agents).map(f).collect(),
            Scheduler::Threaded => std::thread::scope(|scope| {
                let f = &f;
                let handles: Vec<_> = (0..agents).map(|i| scope.spawn(move || f(i))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("agent worker panicked"))
                    .collect()
            }),
        }
    }
}
