use std::path::{Path, PathBuf};

use rlpo_core::agent::{AgentConfig, XiRule};
use rlpo_core::prefopt::DpoConfig;
use rlpo_core::tcav::TcavConfig;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    #[default]
    Xaif,
    Hf,
}

impl std::str::FromStr for FeedbackMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "xaif" => Ok(FeedbackMode::Xaif),
            "hf" => Ok(FeedbackMode::Hf),
            other => Err(format!("unknown feedback mode `{other}` (expected xaif or hf)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HfFallback {
    /// Stop the run with a resumable checkpoint.
    #[default]
    Abort,
    /// Score the pending step with TCAV instead.
    UseTcav,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HfConfig {
    pub timeout_s: f64,
    pub fallback: HfFallback,
    /// Distinct voters needed to close a pending item.
    pub voters: usize,
}

impl Default for HfConfig {
    fn default() -> Self {
        HfConfig {
            timeout_s: 300.0,
            fallback: HfFallback::Abort,
            voters: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XiConfig {
    pub init: f64,
    pub rule: XiRule,
}

impl Default for XiConfig {
    fn default() -> Self {
        XiConfig {
            init: 0.1,
            rule: XiRule::Additive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// World directory written by `rlpo world build`.
    pub world: PathBuf,
    /// Probe checkpoint stem.
    pub probe: PathBuf,
    /// Generator checkpoint stem.
    pub generator: PathBuf,
    /// Action-space file written by `rlpo seeds`.
    pub action_space: PathBuf,
    /// Name of the class being explained.
    pub class: String,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub eta_inclusive: bool,
    /// Steps per episode.
    pub steps: usize,
    #[serde(default = "one")]
    pub episodes: usize,
    /// Images sampled per step; split into two equal groups.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub tcav: TcavConfig,
    #[serde(default)]
    pub xi: XiConfig,
    #[serde(default)]
    pub feedback_mode: FeedbackMode,
    #[serde(default)]
    pub hf: HfConfig,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "yes")]
    pub save_images: bool,
    /// Write measured step times into `steps.log`. Off by default so that
    /// the log is reproducible byte for byte; times always go to
    /// `timings.log`.
    #[serde(default)]
    pub log_wall_time: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_eta() -> f64 {
    0.7
}
fn one() -> usize {
    1
}
fn default_batch() -> usize {
    10
}
fn default_checkpoint_every() -> usize {
    50
}
fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn new(world: PathBuf, probe: PathBuf, generator: PathBuf, action_space: PathBuf, class: &str) -> Self {
        RunConfig {
            world,
            probe,
            generator,
            action_space,
            class: class.to_string(),
            eta: default_eta(),
            eta_inclusive: false,
            steps: 300,
            episodes: 1,
            batch_size: default_batch(),
            agent: AgentConfig::default(),
            dpo: DpoConfig::default(),
            tcav: TcavConfig::default(),
            xi: XiConfig::default(),
            feedback_mode: FeedbackMode::Xaif,
            hf: HfConfig::default(),
            checkpoint_every: default_checkpoint_every(),
            save_images: true,
            log_wall_time: false,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps * self.episodes
    }

    pub fn validate(&self) -> RunResult<()> {
        let bad = |m: String| Err(RunError::Config(m));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if self.steps == 0 || self.episodes == 0 {
            return bad("steps and episodes must be >= 1".into());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and >= 2, got {}", self.batch_size));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.xi.init) {
            return bad("xi.init must lie in [0, 1]".into());
        }
        if self.hf.voters == 0 || !(self.hf.timeout_s > 0.0) {
            return bad("hf.voters and hf.timeout_s must be positive".into());
        }
        self.agent.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.dpo.validate().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    /// Every referenced artifact must exist.
    pub fn check_artifacts(&self) -> RunResult<()> {
        let with_ext = |p: &Path, ext: &str| p.with_extension(ext);
        let required = [
            self.world.join("world.json"),
            with_ext(&self.probe, "json"),
            with_ext(&self.probe, "bin"),
            with_ext(&self.generator, "json"),
            with_ext(&self.generator, "bin"),
            self.action_space.clone(),
        ];
        for p in required {
            if !p.exists() {
                return Err(RunError::Config(format!("missing artifact {}", p.display())));
            }
        }
        Ok(())
    }

    /// Read a JSON config, resolving relative artifact paths against the
    /// config file's directory.
    pub fn load(path: &Path) -> RunResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.world, &mut cfg.probe, &mut cfg.generator, &mut cfg.action_space] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
