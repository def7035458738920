//! Building the inputs of a run: world, probe, pretrained generator and
//! action space.

use std::fs;
use std::path::{Path, PathBuf};

use rlpo_core::gen::{pretrain, GeneratorConfig, GeneratorState, PretrainConfig, PretrainReport};
use rlpo_core::probe::{train_classifier_with_neutral, ProbeConfig, ProbeModel, TrainingReport};
use rlpo_core::seeds::{build_action_space, SeedReport, TemplateDescriber};
use rlpo_core::synthworld::{build_world, render_keyword_bank, Split, World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::RunResult;

pub const WORLD_DIR: &str = "world";
pub const PROBE_STEM: &str = "probe";
pub const GENERATOR_STEM: &str = "generator";
pub const ACTION_SPACE: &str = "action_space.json";
pub const RUN_CONFIG: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTraining {
    pub config: ProbeConfig,
    /// Off-distribution images trained towards neutral logits.
    pub neutral_images: usize,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        ProbeTraining {
            config: ProbeConfig::default(),
            neutral_images: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorTraining {
    pub config: GeneratorConfig,
    pub pretrain: PretrainConfig,
    /// Rendered images per keyword in the pretraining bank.
    pub bank_per_keyword: usize,
    pub bank_seed: u64,
    /// Instance offset that keeps the bank disjoint from the world's
    /// keyword templates.
    pub bank_offset: u64,
    pub init_seed: u64,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        GeneratorTraining {
            config: GeneratorConfig::default(),
            pretrain: PretrainConfig::default(),
            bank_per_keyword: 200,
            bank_seed: 99,
            bank_offset: 1000,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    pub similarity_threshold: f64,
    pub max_keywords: usize,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        SeedsConfig {
            similarity_threshold: 0.95,
            max_keywords: 20,
        }
    }
}

/// Everything `prepare` needs; each part has working defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub world: WorldConfig,
    pub probe: ProbeTraining,
    pub generator: GeneratorTraining,
    pub seeds: SeedsConfig,
}

pub fn train_probe(world: &World, cfg: &ProbeTraining) -> RunResult<(ProbeModel, TrainingReport)> {
    let neutral = world.neutral_images(cfg.neutral_images)?;
    Ok(train_classifier_with_neutral(&world.dataset, &neutral, &cfg.config)?)
}

/// A fresh generator pretrained on rendered banks of every world keyword.
pub fn pretrain_generator(world: &World, cfg: &GeneratorTraining) -> RunResult<(GeneratorState, PretrainReport)> {
    let keywords: Vec<String> = world.config.keywords.iter().map(|k| k.keyword.clone()).collect();
    let mut generator = GeneratorState::init(&cfg.config, &keywords, cfg.init_seed)?;
    let mut data = Vec::new();
    for k in &world.config.keywords {
        let bank = render_keyword_bank(&k.texture, &k.keyword, cfg.bank_per_keyword, cfg.bank_seed, cfg.bank_offset)?;
        data.extend(bank.into_iter().map(|im| (im, k.keyword.clone())));
    }
    let report = pretrain(&mut generator, &data, &cfg.pretrain)?;
    Ok((generator, report))
}

/// Action space from the test images of every class, described against the
/// world's keyword templates.
pub fn seed_keywords(world: &World, cfg: &SeedsConfig) -> RunResult<SeedReport> {
    let describer = TemplateDescriber::from_bank(&world.keyword_templates)?;
    let images: Vec<_> = (0..world.dataset.class_names.len())
        .flat_map(|c| world.dataset.class_images(c, Split::Test))
        .collect();
    Ok(build_action_space(&images, &describer, cfg.similarity_threshold, cfg.max_keywords)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub run_config: PathBuf,
    pub probe_accuracy: f64,
    pub pretrain_loss: f64,
    pub keywords: Vec<String>,
}

/// Build all artifacts under `out` and write a run config that uses them,
/// targeting the first class.
pub fn prepare(out: &Path, cfg: &PrepareConfig) -> RunResult<Prepared> {
    fs::create_dir_all(out)?;
    let world = build_world(&cfg.world)?;
    world.save(&out.join(WORLD_DIR))?;
    let (probe, _) = train_probe(&world, &cfg.probe)?;
    probe.save(&out.join(PROBE_STEM))?;
    let (generator, pre) = pretrain_generator(&world, &cfg.generator)?;
    generator.save(&out.join(GENERATOR_STEM))?;
    let seeds = seed_keywords(&world, &cfg.seeds)?;
    seeds.action_space.save(&out.join(ACTION_SPACE))?;
    let run = RunConfig::new(
        PathBuf::from(WORLD_DIR),
        PathBuf::from(PROBE_STEM),
        PathBuf::from(GENERATOR_STEM),
        PathBuf::from(ACTION_SPACE),
        &world.dataset.class_names[0],
    );
    let run_config = out.join(RUN_CONFIG);
    fs::write(&run_config, serde_json::to_string_pretty(&run)?)?;
    Ok(Prepared {
        run_config,
        probe_accuracy: probe.accuracy(&world.dataset, Split::Test)?,
        pretrain_loss: pre.final_smoothed_loss,
        keywords: seeds.action_space.keywords(),
    })
}
