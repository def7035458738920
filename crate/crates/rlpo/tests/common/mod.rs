#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rlpo::artifacts::{prepare, GeneratorTraining, PrepareConfig, ProbeTraining};
use rlpo::RunConfig;
use rlpo_core::gen::{GeneratorConfig, PretrainConfig};
use rlpo_core::probe::ProbeConfig;
use rlpo_core::synthworld::WorldConfig;
use rlpo_core::tcav::TcavConfig;

/// Small artifacts shared by every test in one binary. Built once under the
/// target tmp dir, keyed by `name` so test binaries never share a dir.
pub fn artifacts(name: &str) -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("fixture-{name}"));
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = PrepareConfig {
            world: WorldConfig {
                train_per_class: 30,
                test_per_class: 10,
                random_pool_size: 40,
                templates_per_keyword: 8,
                ..WorldConfig::default()
            },
            probe: ProbeTraining {
                config: ProbeConfig {
                    epochs: 5,
                    ..ProbeConfig::default()
                },
                neutral_images: 20,
            },
            generator: GeneratorTraining {
                config: GeneratorConfig {
                    hidden: vec![32, 32],
                    t_diff: 10,
                    ..GeneratorConfig::default()
                },
                pretrain: PretrainConfig {
                    steps: 30,
                    ..PretrainConfig::default()
                },
                bank_per_keyword: 10,
                ..GeneratorTraining::default()
            },
            ..PrepareConfig::default()
        };
        prepare(&dir, &cfg).unwrap();
        dir
    })
}

/// A short xaif run config over the shared artifacts.
pub fn run_config(name: &str, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::load(&artifacts(name).join(rlpo::artifacts::RUN_CONFIG)).unwrap();
    cfg.steps = steps;
    cfg.tcav = TcavConfig {
        random_set_size: 10,
        ..TcavConfig::default()
    };
    cfg.dpo.noise_draws_per_image = 2;
    cfg.checkpoint_every = 3;
    cfg
}
