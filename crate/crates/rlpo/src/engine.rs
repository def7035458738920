//! The RLPO loop: select a keyword, sample and split a batch, score the two
//! groups, apply DPO or mark the keyword explainable, reward, and learn.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use rlpo_core::agent::{
    compute_reward, encode_state, q_learn_step, select_action, sync_target, QNets, ReplayBuffer, Transition, XiTracker,
};
use rlpo_core::gen::{sample, GeneratorState};
use rlpo_core::image::Image;
use rlpo_core::nn::checkpoint::activations_of;
use rlpo_core::nn::{Activation, Checkpoint, Dtype, OptimizerState};
use rlpo_core::prefopt::{apply_dpo_update, decide_preference_with, split_indices, Decision, PreferencePair};
use rlpo_core::probe::ProbeModel;
use rlpo_core::rng::derive_seed;
use rlpo_core::seeds::ActionSpace;
use rlpo_core::synthworld::{Split, World};
use rlpo_core::tcav::{score_groups, ClassTarget};
use serde::{Deserialize, Serialize};

use crate::config::{FeedbackMode, HfFallback, RunConfig};
use crate::error::{RunError, RunResult};
use crate::feedback::{FeedbackHub, PendingItem};
use crate::record::{image_path, read_log, ScoreSource, StepRecord};

pub const MANIFEST: &str = "manifest";
pub const STEPS_LOG: &str = "steps.log";
pub const TIMINGS_LOG: &str = "timings.log";
pub const REPORT: &str = "report";
const LATEST: &str = "checkpoints/latest";

const TAG_QNET: u64 = 0xa9e7;
const TAG_ACTION: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_RANDOMS: u64 = 4;
const TAG_DPO: u64 = 5;
const TAG_LEARN: u64 = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub total_steps: usize,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> RunResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| RunError::Resume {
            dir: dir.to_path_buf(),
            reason: format!("cannot read manifest: {e}"),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Idle,
    Running,
    AwaitingFeedback,
    Completed,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub phase: RunPhase,
    pub completed_steps: usize,
    pub total_steps: usize,
    pub mode: FeedbackMode,
    pub error: Option<String>,
}

pub type SharedStatus = Arc<RwLock<RunStatus>>;

pub fn new_status(total_steps: usize, mode: FeedbackMode) -> SharedStatus {
    Arc::new(RwLock::new(RunStatus {
        phase: RunPhase::Idle,
        completed_steps: 0,
        total_steps,
        mode,
        error: None,
    }))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop cleanly, with a checkpoint, once this many steps are done.
    pub stop_after: Option<usize>,
    /// Vote source; required in hf mode.
    pub hub: Option<FeedbackHub>,
    pub status: Option<SharedStatus>,
    /// Checked between steps.
    pub stop: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub completed_steps: usize,
    pub total_steps: usize,
    pub already_complete: bool,
}

/// Loaded artifacts that never change during a run.
pub struct Context {
    pub config: RunConfig,
    pub world: World,
    pub probe: ProbeModel,
    pub class: usize,
    pub target: ClassTarget,
    pub keywords: Vec<String>,
}

impl Context {
    pub fn load(config: &RunConfig) -> RunResult<(Self, GeneratorState)> {
        config.validate()?;
        config.check_artifacts()?;
        let world = World::load(&config.world)?;
        let probe = ProbeModel::load(&config.probe)?;
        let generator = GeneratorState::load(&config.generator)?;
        let space = ActionSpace::load(&config.action_space)?;
        let class = world
            .dataset
            .class_index(&config.class)
            .ok_or_else(|| RunError::Config(format!("unknown class `{}`", config.class)))?;
        let keywords = space.keywords();
        if let Some(k) = keywords.iter().find(|k| !generator.prompt_table.contains_key(*k)) {
            return Err(RunError::Config(format!("generator has no prompt for keyword `{k}`")));
        }
        let test = world.dataset.class_images(class, Split::Test);
        let target = ClassTarget::new(&probe, &test, class)?;
        Ok((
            Context {
                config: config.clone(),
                world,
                probe,
                class,
                target,
                keywords,
            },
            generator,
        ))
    }
}

/// Everything a step mutates; cloned before each step so a failed step can
/// be checkpointed at its starting point.
#[derive(Debug, Clone)]
pub struct Learner {
    pub generator: GeneratorState,
    pub qnets: QNets,
    pub buffer: ReplayBuffer,
    pub xi: XiTracker,
    pub agent_state: Vec<f64>,
    pub completed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EngineSnapshot {
    completed: usize,
    agent_state: Vec<f64>,
    buffer: ReplayBuffer,
    xi: XiTracker,
}

impl Learner {
    pub fn fresh(ctx: &Context, generator: GeneratorState) -> RunResult<Self> {
        let cfg = &ctx.config;
        let d_s = ctx.probe.activation_dim();
        let qnets = QNets::init(d_s, ctx.keywords.len(), &cfg.agent, derive_seed(cfg.seed, &[TAG_QNET]))?;
        let xi = XiTracker::new(&ctx.keywords, cfg.xi.init, cfg.total_steps(), cfg.xi.rule)?;
        Ok(Learner {
            generator,
            qnets,
            buffer: ReplayBuffer::new(cfg.agent.buffer_capacity),
            xi,
            agent_state: vec![0.0; d_s],
            completed: 0,
        })
    }

    fn checkpoint(&self, dir: &Path) -> RunResult<()> {
        let c = self.completed;
        let ckdir = dir.join("checkpoints");
        fs::create_dir_all(&ckdir)?;
        let mut ad = Checkpoint::default();
        ad.push_adapters("adapter", &self.generator.adapters);
        ad.meta = serde_json::json!({
            "scales": self.generator.adapters.iter().map(|(k, a)| (k.to_string(), a.scale)).collect::<BTreeMap<_, _>>(),
            "optimizer": self.generator.adapter_optimizer,
        });
        ad.write(&ckdir.join(format!("adapters_{c}")), Dtype::F64)?;
        let mut q = Checkpoint::default();
        q.push_mlp("online", &self.qnets.online);
        q.push_mlp("target", &self.qnets.target);
        q.meta = serde_json::json!({
            "activations": activations_of(&self.qnets.online),
            "optimizer": self.qnets.optimizer,
        });
        q.write(&ckdir.join(format!("qnet_{c}")), Dtype::F64)?;
        let snap = EngineSnapshot {
            completed: c,
            agent_state: self.agent_state.clone(),
            buffer: self.buffer.clone(),
            xi: self.xi.clone(),
        };
        fs::write(ckdir.join(format!("engine_{c}.json")), serde_json::to_string(&snap)?)?;
        let tmp = dir.join(format!("{LATEST}.tmp"));
        fs::write(&tmp, c.to_string())?;
        fs::rename(tmp, dir.join(LATEST))?;
        Ok(())
    }

    fn restore(ctx: &Context, generator: GeneratorState, dir: &Path) -> RunResult<Self> {
        let bad = |reason: String| RunError::Resume {
            dir: dir.to_path_buf(),
            reason,
        };
        let latest = fs::read_to_string(dir.join(LATEST)).map_err(|e| bad(format!("no checkpoint: {e}")))?;
        let c: usize = latest
            .trim()
            .parse()
            .map_err(|_| bad(format!("corrupt checkpoint marker `{}`", latest.trim())))?;
        let ckdir = dir.join("checkpoints");
        let read = |name: String| {
            Checkpoint::read(&ckdir.join(&name)).map_err(|e| bad(format!("checkpoint `{name}`: {e}")))
        };
        let mut learner = Learner::fresh(ctx, generator)?;
        let ad = read(format!("adapters_{c}"))?;
        let scales: BTreeMap<String, f64> = serde_json::from_value(ad.meta["scales"].clone())?;
        let scales = scales
            .into_iter()
            .map(|(k, v)| k.parse::<usize>().map(|k| (k, v)))
            .collect::<Result<BTreeMap<_, _>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        learner.generator.adapters = ad.adapters("adapter", &scales)?;
        learner.generator.adapter_optimizer = serde_json::from_value(ad.meta["optimizer"].clone())?;
        let q = read(format!("qnet_{c}"))?;
        let acts: Vec<Activation> = serde_json::from_value(q.meta["activations"].clone())?;
        learner.qnets.online = q.mlp("online", &acts)?;
        learner.qnets.target = q.mlp("target", &acts)?;
        learner.qnets.optimizer = serde_json::from_value::<OptimizerState>(q.meta["optimizer"].clone())?;
        let path = ckdir.join(format!("engine_{c}.json"));
        let text = fs::read_to_string(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let snap: EngineSnapshot = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if snap.completed != c {
            return Err(bad(format!("engine snapshot is at step {} but marker says {c}", snap.completed)));
        }
        learner.agent_state = snap.agent_state;
        learner.buffer = snap.buffer;
        learner.xi = snap.xi;
        learner.completed = c;
        Ok(learner)
    }
}

fn set_status(opts: &RunOptions, f: impl FnOnce(&mut RunStatus)) {
    if let Some(s) = &opts.status {
        f(&mut s.write().expect("status lock"));
    }
}

fn save_group(dir: &Path, episode: usize, t: usize, group: usize, images: &[Image]) -> RunResult<Vec<String>> {
    let mut out = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let rel = image_path(episode, t, group, i);
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("image path has a parent"))?;
        im.write_png(&path)?;
        out.push(rel);
    }
    Ok(out)
}

/// One loop iteration. Mutates `learner` and returns the record to log.
pub fn run_step(
    ctx: &Context,
    learner: &mut Learner,
    dir: &Path,
    opts: &RunOptions,
) -> RunResult<StepRecord> {
    let cfg = &ctx.config;
    let step = learner.completed;
    let (episode, t) = (step / cfg.steps, step % cfg.steps);
    let seed = |tag: u64| derive_seed(cfg.seed, &[episode as u64, t as u64, tag]);
    if t == 0 {
        learner.agent_state.iter_mut().for_each(|v| *v = 0.0);
    }
    let s = learner.agent_state.clone();
    let action = select_action(&learner.qnets, &s, cfg.agent.epsilon, seed(TAG_ACTION))?;
    let keyword = ctx.keywords[action].clone();
    let batch = sample(&learner.generator, &keyword, cfg.batch_size, seed(TAG_SAMPLE), true)?;
    let (i1, i2) = split_indices(batch.len(), seed(TAG_SPLIT))?;
    let g1: Vec<Image> = i1.iter().map(|&i| batch[i].clone()).collect();
    let g2: Vec<Image> = i2.iter().map(|&i| batch[i].clone()).collect();
    let mut images = Vec::new();
    if cfg.save_images {
        images.extend(save_group(dir, episode, t, 1, &g1)?);
        images.extend(save_group(dir, episode, t, 2, &g2)?);
    }

    let tcav = || -> RunResult<(f64, f64)> {
        let r = score_groups(
            &ctx.probe,
            &ctx.target,
            &g1,
            &g2,
            &ctx.world.random_pool,
            &cfg.tcav,
            seed(TAG_RANDOMS),
        )?;
        Ok((r.ts1, r.ts2))
    };
    let (ts1, ts2, scores) = match cfg.feedback_mode {
        FeedbackMode::Xaif => {
            let (a, b) = tcav()?;
            (a, b, ScoreSource::Tcav)
        }
        FeedbackMode::Hf => {
            let hub = opts
                .hub
                .as_ref()
                .ok_or_else(|| RunError::Config("hf mode needs a feedback service".into()))?;
            set_status(opts, |s| s.phase = RunPhase::AwaitingFeedback);
            let item = PendingItem {
                step,
                episode,
                t,
                keyword: keyword.clone(),
                images: images.clone(),
                group_size: g1.len(),
                votes_needed: cfg.hf.voters,
                votes_received: 0,
            };
            let tally = hub.request(item, Duration::from_secs_f64(cfg.hf.timeout_s));
            set_status(opts, |s| s.phase = RunPhase::Running);
            match (tally, cfg.hf.fallback) {
                (Some(v), _) => {
                    let (a, b) = v.shares();
                    (
                        a,
                        b,
                        ScoreSource::Votes {
                            group1: v.group1,
                            group2: v.group2,
                        },
                    )
                }
                (None, HfFallback::UseTcav) => {
                    let (a, b) = tcav()?;
                    (a, b, ScoreSource::TcavFallback)
                }
                (None, HfFallback::Abort) => {
                    return Err(RunError::FeedbackTimeout {
                        step,
                        timeout_s: cfg.hf.timeout_s,
                    })
                }
            }
        }
    };

    // Vote shares are preferences, not explanation scores: they never gate
    // on η, so a unanimous vote is still a DPO preference.
    let decision = match scores {
        ScoreSource::Votes { .. } => decide_preference_with(ts1, ts2, 1.0, false),
        _ => decide_preference_with(ts1, ts2, cfg.eta, cfg.eta_inclusive),
    };
    let (mut loss_before, mut loss_after) = (None, None);
    let xi = match decision {
        Decision::ApplyDpo { winner, .. } => {
            let (w, l, tw, tl) = if winner == 1 { (&g1, &g2, ts1, ts2) } else { (&g2, &g1, ts2, ts1) };
            let pair = PreferencePair {
                winner: w.clone(),
                loser: l.clone(),
                keyword: keyword.clone(),
                ts_winner: tw,
                ts_loser: tl,
                step,
            };
            let rec = apply_dpo_update(&mut learner.generator, &pair, &cfg.dpo, seed(TAG_DPO))?;
            loss_before = Some(rec.loss_before);
            loss_after = Some(rec.loss_after);
            learner.xi.update(&keyword, false)?
        }
        Decision::ReachedExplainable => learner.xi.update(&keyword, true)?,
        Decision::NoSignal => learner.xi.update(&keyword, false)?,
    };
    let reward = compute_reward(ts1, ts2, xi);
    let preferred = if ts2 > ts1 { &g2 } else { &g1 };
    let s_next = encode_state(&ctx.probe, preferred)?;
    learner.buffer.push(Transition {
        s,
        a: action,
        r: reward,
        s_next: s_next.clone(),
    });
    let q_loss = q_learn_step(&mut learner.qnets, &learner.buffer, seed(TAG_LEARN))?;
    if (step + 1) % cfg.agent.update_every == 0 {
        sync_target(&mut learner.qnets);
    }
    learner.agent_state = s_next;
    learner.completed += 1;
    Ok(StepRecord {
        step,
        episode,
        t,
        action,
        keyword,
        ts1,
        ts2,
        reward,
        xi,
        decision,
        scores,
        dpo_loss_before: loss_before,
        dpo_loss_after: loss_after,
        q_loss,
        wall_time_ms: None,
        images,
    })
}

fn append_line(path: &Path, line: &str) -> RunResult<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{line}\n").as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Create the run directory and its manifest. Refuses to overwrite a run.
pub fn init_run(config: &RunConfig, dir: &Path) -> RunResult<Manifest> {
    config.validate()?;
    config.check_artifacts()?;
    if dir.join(MANIFEST).exists() {
        return Err(RunError::Config(format!("{} already holds a run", dir.display())));
    }
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        config: config.clone(),
        seed: config.seed,
        total_steps: config.total_steps(),
        versions: BTreeMap::from([
            ("rlpo".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("steps_log_format".to_string(), "1".to_string()),
        ]),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Start a new run in `dir` and drive it to completion (or `stop_after`).
pub fn run_rlpo(config: &RunConfig, dir: &Path, opts: &RunOptions) -> RunResult<RunSummary> {
    init_run(config, dir)?;
    drive(dir, opts)
}

/// Continue a run from its latest checkpoint.
pub fn resume(dir: &Path, opts: &RunOptions) -> RunResult<RunSummary> {
    drive(dir, opts)
}

/// Run a directory that holds a manifest, from its latest checkpoint or from
/// scratch if none was written yet.
pub fn drive(dir: &Path, opts: &RunOptions) -> RunResult<RunSummary> {
    let manifest = Manifest::read(dir)?;
    let (ctx, generator) = Context::load(&manifest.config)?;
    let cfg = &ctx.config;
    let total = cfg.total_steps();
    if cfg.feedback_mode == FeedbackMode::Hf && opts.hub.is_none() {
        return Err(RunError::Config("hf mode needs a feedback service (use `serve`)".into()));
    }
    let mut learner = if dir.join(LATEST).exists() {
        Learner::restore(&ctx, generator, dir)?
    } else {
        let l = Learner::fresh(&ctx, generator)?;
        l.checkpoint(dir)?;
        l
    };
    let log_path = dir.join(STEPS_LOG);
    let log = read_log(&log_path)?;
    if log.len() < learner.completed {
        return Err(RunError::Resume {
            dir: dir.to_path_buf(),
            reason: format!(
                "steps.log has {} records but the checkpoint is at step {}",
                log.len(),
                learner.completed
            ),
        });
    }
    if log.len() > learner.completed {
        // Records past the checkpoint are recomputed identically.
        let text = fs::read_to_string(&log_path)?;
        let kept: String = text.lines().take(learner.completed).map(|l| format!("{l}\n")).collect();
        fs::write(&log_path, kept)?;
    }
    set_status(opts, |s| {
        s.completed_steps = learner.completed;
        s.total_steps = total;
        s.mode = cfg.feedback_mode;
    });
    if learner.completed >= total {
        set_status(opts, |s| s.phase = RunPhase::Completed);
        log::info!("run in {} is already complete ({total} steps)", dir.display());
        return Ok(RunSummary {
            dir: dir.to_path_buf(),
            completed_steps: learner.completed,
            total_steps: total,
            already_complete: true,
        });
    }
    set_status(opts, |s| s.phase = RunPhase::Running);
    while learner.completed < total {
        let stop_now = opts.stop_after.is_some_and(|n| learner.completed >= n)
            || opts.stop.as_ref().is_some_and(|f| f.load(Ordering::SeqCst));
        if stop_now {
            learner.checkpoint(dir)?;
            set_status(opts, |s| s.phase = RunPhase::Stopped);
            return Ok(RunSummary {
                dir: dir.to_path_buf(),
                completed_steps: learner.completed,
                total_steps: total,
                already_complete: false,
            });
        }
        let before = learner.clone();
        let started = Instant::now();
        let step = learner.completed;
        match run_step(&ctx, &mut learner, dir, opts) {
            Ok(mut rec) => {
                let ms = started.elapsed().as_secs_f64() * 1e3;
                if cfg.log_wall_time {
                    rec.wall_time_ms = Some(ms);
                }
                append_line(&log_path, &serde_json::to_string(&rec)?)?;
                append_line(
                    &dir.join(TIMINGS_LOG),
                    &serde_json::json!({"step": step, "wall_time_ms": ms}).to_string(),
                )?;
                set_status(opts, |s| s.completed_steps = learner.completed);
                if learner.completed % cfg.checkpoint_every == 0 || learner.completed == total {
                    learner.checkpoint(dir)?;
                }
            }
            Err(e) => {
                before.checkpoint(dir)?;
                let err = RunError::Step {
                    step,
                    episode: step / cfg.steps,
                    t: step % cfg.steps,
                    source: Box::new(e),
                };
                log::error!("{err}; resumable checkpoint written at step {step}");
                set_status(opts, |s| {
                    s.phase = RunPhase::Failed;
                    s.error = Some(err.to_string());
                });
                return Err(err);
            }
        }
    }
    set_status(opts, |s| s.phase = RunPhase::Completed);
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        completed_steps: learner.completed,
        total_steps: total,
        already_complete: false,
    })
}

/// The generator as of the latest checkpoint of a run.
pub fn load_final_generator(dir: &Path) -> RunResult<(Context, GeneratorState)> {
    let manifest = Manifest::read(dir)?;
    let (ctx, generator) = Context::load(&manifest.config)?;
    let learner = Learner::restore(&ctx, generator, dir)?;
    Ok((ctx, learner.generator))
}
