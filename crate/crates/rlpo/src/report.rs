//! Post-run evaluation: keyword ranking, localization and c-deletion for the
//! top concepts, concept-set statistics, and optional fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rlpo_core::evalx::{
    action_metrics, c_deletion_curve, fine_tune_on_concepts, localize, set_statistics, ActionMetrics, DeletionCurve,
    Fill, FineTuneConfig, FineTuneReport, LocalizeConfig, ScoredConcept, SetStatistics, SetStatsConfig,
};
use rlpo_core::gen::{sample, GeneratorState};
use rlpo_core::image::Image;
use rlpo_core::rng::{derive_seed, tag_str};
use rlpo_core::synthworld::Split;
use rlpo_core::tcav::{matrix_rows, sample_random_set, score_concept};
use serde::{Deserialize, Serialize};

use crate::engine::{load_final_generator, Context, Manifest, REPORT, STEPS_LOG};
use crate::error::{RunError, RunResult};
use crate::record::{read_log, StepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Concepts that get a deletion curve.
    pub top_k: usize,
    /// Final-generator samples per concept used as localization prompts
    /// and for concept scores.
    pub concept_samples: usize,
    /// Test images of the run's class used for deletion curves.
    pub test_images: usize,
    pub deletion_steps: usize,
    /// Fill deleted pixels with 0 instead of the dataset mean.
    pub zero_fill: bool,
    pub localize: LocalizeConfig,
    /// Images per set for intra/inter statistics.
    pub set_size: usize,
    pub stats: SetStatsConfig,
    /// Random sets averaged into each concept's evaluation TCAV.
    pub tcav_repeats: usize,
    pub fine_tune: Option<FineTuneConfig>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 3,
            concept_samples: 20,
            test_images: 50,
            deletion_steps: 10,
            zero_fill: false,
            localize: LocalizeConfig::default(),
            set_size: 50,
            stats: SetStatsConfig::default(),
            tcav_repeats: 5,
            fine_tune: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSummary {
    pub keyword: String,
    pub best_tcav: f64,
    pub mean_tcav: f64,
    /// Steps that selected this keyword.
    pub selected: u64,
    pub final_xi: Option<f64>,
    pub explainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDeletion {
    pub keyword: String,
    /// TCAV of final-generator samples, averaged over random sets.
    pub tcav: f64,
    pub curve: DeletionCurve,
    /// Curve table, relative to the run directory.
    pub table: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatistics {
    pub a: String,
    pub b: String,
    pub stats: SetStatistics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatMeans {
    pub mean_cosine: f64,
    pub sliced_wasserstein: f64,
    pub hotelling_t2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSets {
    /// Keywords compared; the explainable set, topped up with the best
    /// ranked keywords when it has fewer than two members.
    pub keywords: Vec<String>,
    pub intra: Vec<PairStatistics>,
    pub inter: Vec<PairStatistics>,
    pub intra_mean: StatMeans,
    pub inter_mean: StatMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub class: String,
    pub eta: f64,
    pub steps: usize,
    /// Ranked by best TCAV, then mean TCAV, then keyword.
    pub keywords: Vec<KeywordSummary>,
    pub explainable: Vec<String>,
    pub explainable_empty: bool,
    pub cumulative_reward: Vec<f64>,
    pub action_metrics: Option<ActionMetrics>,
    pub deletion: Vec<ConceptDeletion>,
    pub concept_sets: Option<ConceptSets>,
    pub fine_tune: Option<FineTuneReport>,
    /// Sections that failed; the rest of the report is still valid.
    pub errors: Vec<String>,
}

/// Per-keyword best and mean TCAV over the log, ranked.
pub fn rank_keywords(log: &[StepRecord], keywords: &[String], eta: f64) -> Vec<KeywordSummary> {
    let mut out: Vec<KeywordSummary> = keywords
        .iter()
        .map(|k| {
            let recs: Vec<&StepRecord> = log.iter().filter(|r| &r.keyword == k).collect();
            let best = recs.iter().map(|r| r.max_ts()).fold(0.0, f64::max);
            let mean = if recs.is_empty() {
                0.0
            } else {
                recs.iter().map(|r| r.max_ts()).sum::<f64>() / recs.len() as f64
            };
            KeywordSummary {
                keyword: k.clone(),
                best_tcav: best,
                mean_tcav: mean,
                selected: recs.len() as u64,
                final_xi: recs.last().map(|r| r.xi),
                explainable: !recs.is_empty() && best >= eta,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.best_tcav
            .total_cmp(&a.best_tcav)
            .then(b.mean_tcav.total_cmp(&a.mean_tcav))
            .then(a.keyword.cmp(&b.keyword))
    });
    out
}

pub fn cumulative_rewards(log: &[StepRecord]) -> Vec<f64> {
    log.iter()
        .scan(0.0, |acc, r| {
            *acc += r.reward;
            Some(*acc)
        })
        .collect()
}

pub fn action_counts(log: &[StepRecord], actions: usize) -> Vec<u64> {
    let mut counts = vec![0u64; actions];
    for r in log {
        if r.action < actions {
            counts[r.action] += 1;
        }
    }
    counts
}

/// Mean TCAV of `images` for the run's class over `repeats` random sets.
pub fn concept_tcav(ctx: &Context, images: &[Image], repeats: usize, seed: u64) -> RunResult<f64> {
    let mut total = 0.0;
    for r in 0..repeats.max(1) {
        let randoms = sample_random_set(
            &ctx.world.random_pool,
            ctx.config.tcav.random_set_size,
            derive_seed(seed, &[r as u64]),
        )?;
        let random_acts = matrix_rows(&ctx.probe.activations(&randoms)?);
        let (s, _) = score_concept(&ctx.probe, &ctx.target, images, &random_acts, &ctx.config.tcav, "concept")?;
        total += s.value;
    }
    Ok(total / repeats.max(1) as f64)
}

fn means(stats: &[PairStatistics]) -> StatMeans {
    let n = stats.len().max(1) as f64;
    StatMeans {
        mean_cosine: stats.iter().map(|s| s.stats.mean_cosine).sum::<f64>() / n,
        sliced_wasserstein: stats.iter().map(|s| s.stats.sliced_wasserstein).sum::<f64>() / n,
        hotelling_t2: stats.iter().map(|s| s.stats.hotelling_t2).sum::<f64>() / n,
    }
}

/// Intra statistics compare two independently sampled sets of one keyword;
/// inter statistics compare first sets of different keywords.
pub fn concept_set_statistics(
    ctx: &Context,
    generator: &GeneratorState,
    keywords: &[String],
    cfg: &EvalConfig,
) -> RunResult<ConceptSets> {
    let acts = |k: &str, which: u64| -> RunResult<Vec<Vec<f64>>> {
        let seed = derive_seed(cfg.seed, &[0x5e75, tag_str(k), which]);
        let images = sample(generator, k, cfg.set_size, seed, true)?;
        Ok(matrix_rows(&ctx.probe.activations(&images)?))
    };
    let mut first = BTreeMap::new();
    let mut intra = Vec::new();
    for k in keywords {
        let a = acts(k, 0)?;
        let b = acts(k, 1)?;
        intra.push(PairStatistics {
            a: k.clone(),
            b: k.clone(),
            stats: set_statistics(&a, &b, &cfg.stats)?,
        });
        first.insert(k.clone(), a);
    }
    let mut inter = Vec::new();
    for (i, a) in keywords.iter().enumerate() {
        for b in &keywords[i + 1..] {
            inter.push(PairStatistics {
                a: a.clone(),
                b: b.clone(),
                stats: set_statistics(&first[a], &first[b], &cfg.stats)?,
            });
        }
    }
    Ok(ConceptSets {
        keywords: keywords.to_vec(),
        intra_mean: means(&intra),
        inter_mean: means(&inter),
        intra,
        inter,
    })
}

fn deletion_for(
    ctx: &Context,
    generator: &GeneratorState,
    keyword: &str,
    test: &[Image],
    cfg: &EvalConfig,
) -> RunResult<(f64, DeletionCurve)> {
    let seed = derive_seed(cfg.seed, &[0xde1e, tag_str(keyword)]);
    let concept = sample(generator, keyword, cfg.concept_samples, seed, true)?;
    let tcav = concept_tcav(ctx, &concept, cfg.tcav_repeats, derive_seed(seed, &[1]))?;
    let heatmaps = test
        .iter()
        .map(|im| localize(&concept, im, &cfg.localize))
        .collect::<Result<Vec<_>, _>>()?;
    let fill = if cfg.zero_fill {
        Fill::Zero
    } else {
        Fill::Mean(ctx.world.dataset.mean_pixel())
    };
    let curve = c_deletion_curve(&ctx.probe, test, ctx.class, &heatmaps, cfg.deletion_steps, fill)?;
    Ok((tcav, curve))
}

fn curve_table(curve: &DeletionCurve) -> String {
    let mut s = String::from("fraction\tprobability\n");
    for (f, p) in curve.fractions.iter().zip(&curve.probabilities) {
        s.push_str(&format!("{f}\t{p}\n"));
    }
    s
}

fn safe_name(keyword: &str) -> String {
    keyword
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Evaluate a finished run and write `report` and `curves/*.tsv` into it.
pub fn evaluate(dir: &Path, cfg: &EvalConfig) -> RunResult<Report> {
    let manifest = Manifest::read(dir)?;
    let log = read_log(&dir.join(STEPS_LOG))?;
    if log.len() < manifest.total_steps {
        return Err(RunError::Config(format!(
            "run in {} is incomplete ({} of {} steps)",
            dir.display(),
            log.len(),
            manifest.total_steps
        )));
    }
    let (ctx, generator) = load_final_generator(dir)?;
    let mut errors = Vec::new();

    let keywords = rank_keywords(&log, &ctx.keywords, ctx.config.eta);
    let explainable: Vec<String> = keywords.iter().filter(|k| k.explainable).map(|k| k.keyword.clone()).collect();
    let action_metrics = match action_metrics(&action_counts(&log, ctx.keywords.len())) {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(format!("action_metrics: {e}"));
            None
        }
    };

    let test: Vec<Image> = ctx
        .world
        .dataset
        .class_images(ctx.class, Split::Test)
        .into_iter()
        .take(cfg.test_images)
        .collect();
    let mut deletion = Vec::new();
    fs::create_dir_all(dir.join("curves"))?;
    for k in keywords.iter().take(cfg.top_k) {
        match deletion_for(&ctx, &generator, &k.keyword, &test, cfg) {
            Ok((tcav, curve)) => {
                let table = format!("curves/{}.tsv", safe_name(&k.keyword));
                fs::write(dir.join(&table), curve_table(&curve))?;
                deletion.push(ConceptDeletion {
                    keyword: k.keyword.clone(),
                    tcav,
                    curve,
                    table,
                });
            }
            Err(e) => errors.push(format!("deletion `{}`: {e}", k.keyword)),
        }
    }

    let mut set_keywords = explainable.clone();
    for k in &keywords {
        if set_keywords.len() >= 2 {
            break;
        }
        if !set_keywords.contains(&k.keyword) {
            set_keywords.push(k.keyword.clone());
        }
    }
    let concept_sets = match concept_set_statistics(&ctx, &generator, &set_keywords, cfg) {
        Ok(s) => Some(s),
        Err(e) => {
            errors.push(format!("concept_sets: {e}"));
            None
        }
    };

    let fine_tune = match &cfg.fine_tune {
        None => None,
        Some(ft) => match fine_tune_report(&ctx, &generator, &explainable, ft, cfg) {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("fine_tune: {e}"));
                None
            }
        },
    };

    let report = Report {
        class: ctx.config.class.clone(),
        eta: ctx.config.eta,
        steps: log.len(),
        explainable_empty: explainable.is_empty(),
        explainable,
        keywords,
        cumulative_reward: cumulative_rewards(&log),
        action_metrics,
        deletion,
        concept_sets,
        fine_tune,
        errors,
    };
    fs::write(dir.join(REPORT), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn fine_tune_report(
    ctx: &Context,
    generator: &GeneratorState,
    explainable: &[String],
    ft: &FineTuneConfig,
    cfg: &EvalConfig,
) -> RunResult<Option<FineTuneReport>> {
    if explainable.is_empty() {
        return Ok(None);
    }
    let mut batches = Vec::new();
    let mut scored = Vec::new();
    for k in explainable {
        let seed = derive_seed(cfg.seed, &[0xf1e7, tag_str(k)]);
        batches.push((sample(generator, k, cfg.concept_samples, seed, true)?, ctx.class));
        scored.push(ScoredConcept {
            name: k.clone(),
            images: sample(generator, k, cfg.concept_samples, derive_seed(seed, &[1]), true)?,
            class: ctx.class,
        });
    }
    let (_, report) = fine_tune_on_concepts(
        &ctx.probe,
        &batches,
        &ctx.world.dataset,
        &ctx.world.random_pool,
        &scored,
        ft,
    )?;
    Ok(Some(report))
}
