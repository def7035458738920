use std::io::{BufRead, BufReader};
use std::path::Path;

use rlpo_core::prefopt::Decision;
use serde::{Deserialize, Serialize};

use crate::error::RunResult;

/// How the two group scores of a step were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScoreSource {
    Tcav,
    /// Vote shares of the two groups.
    Votes { group1: usize, group2: usize },
    /// Human feedback timed out and the run fell back to TCAV.
    TcavFallback,
}

/// One line of `steps.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global step index across episodes, from 0.
    pub step: usize,
    pub episode: usize,
    pub t: usize,
    pub action: usize,
    pub keyword: String,
    pub ts1: f64,
    pub ts2: f64,
    pub reward: f64,
    pub xi: f64,
    pub decision: Decision,
    pub scores: ScoreSource,
    pub dpo_loss_before: Option<f64>,
    pub dpo_loss_after: Option<f64>,
    pub q_loss: Option<f64>,
    pub wall_time_ms: Option<f64>,
    /// Relative to the run directory; group 1 first.
    pub images: Vec<String>,
}

impl StepRecord {
    pub fn max_ts(&self) -> f64 {
        self.ts1.max(self.ts2)
    }

    pub fn dpo_applied(&self) -> bool {
        self.dpo_loss_before.is_some()
    }
}

pub fn read_log(path: &Path) -> RunResult<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn image_path(episode: usize, t: usize, group: usize, i: usize) -> String {
    format!("images/ep{episode}/t{t}/g{group}/{i}.png")
}
