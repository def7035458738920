//! Vote queue between the HTTP layer and the run loop in human-feedback mode.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub step: usize,
    pub episode: usize,
    pub t: usize,
    pub keyword: String,
    /// Relative image paths, group 1 first.
    pub images: Vec<String>,
    pub group_size: usize,
    pub votes_needed: usize,
    pub votes_received: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub group1: usize,
    pub group2: usize,
}

impl VoteTally {
    /// Vote shares, used as the two group scores.
    pub fn shares(&self) -> (f64, f64) {
        let n = (self.group1 + self.group2) as f64;
        (self.group1 as f64 / n, self.group2 as f64 / n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VoteError {
    NothingPending,
    WrongStep { pending: usize },
    DuplicateVoter,
    BadChoice,
}

impl std::fmt::Display for VoteError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VoteError::NothingPending => write!(f, "no step is awaiting feedback"),
            VoteError::WrongStep { pending } => write!(f, "step {pending} is the one awaiting feedback"),
            VoteError::DuplicateVoter => write!(f, "this voter already voted on this step"),
            VoteError::BadChoice => write!(f, "preferred must be 1 or 2"),
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    pending: Option<PendingItem>,
    votes: BTreeMap<String, u8>,
}

/// Exactly-once hand-off: the run loop opens an item, voters fill it, and
/// the loop takes the tally when enough distinct voters have answered.
#[derive(Debug, Clone, Default)]
pub struct FeedbackHub {
    inner: Arc<(Mutex<Inner>, Condvar)>,
}

impl FeedbackHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> Option<PendingItem> {
        let g = self.inner.0.lock().expect("feedback lock");
        g.pending.clone().map(|mut p| {
            p.votes_received = g.votes.len();
            p
        })
    }

    pub fn vote(&self, step: usize, voter: &str, preferred: u8) -> Result<PendingItem, VoteError> {
        if preferred != 1 && preferred != 2 {
            return Err(VoteError::BadChoice);
        }
        let (lock, cv) = &*self.inner;
        let mut g = lock.lock().expect("feedback lock");
        let pending = g.pending.as_ref().ok_or(VoteError::NothingPending)?;
        if pending.step != step {
            return Err(VoteError::WrongStep { pending: pending.step });
        }
        if g.votes.contains_key(voter) {
            return Err(VoteError::DuplicateVoter);
        }
        g.votes.insert(voter.to_string(), preferred);
        let mut item = g.pending.clone().expect("checked above");
        item.votes_received = g.votes.len();
        cv.notify_all();
        Ok(item)
    }

    /// Publish `item` and block until `votes_needed` voters answered or
    /// `timeout` elapsed. The item is withdrawn either way.
    pub fn request(&self, item: PendingItem, timeout: Duration) -> Option<VoteTally> {
        let (lock, cv) = &*self.inner;
        let mut g = lock.lock().expect("feedback lock");
        let needed = item.votes_needed;
        g.votes.clear();
        g.pending = Some(item);
        let deadline = Instant::now() + timeout;
        while g.votes.len() < needed {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            g = cv.wait_timeout(g, deadline - now).expect("feedback lock").0;
        }
        g.pending = None;
        let votes = std::mem::take(&mut g.votes);
        if votes.len() < needed {
            return None;
        }
        let group1 = votes.values().filter(|&&v| v == 1).count();
        Some(VoteTally {
            group1,
            group2: votes.len() - group1,
        })
    }
}
