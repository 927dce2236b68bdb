//! Episode orchestration, severity escalation and benchmark-split output.

mod config;
mod episode;
mod io;
mod split;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ModeName, RunConfig};
pub use episode::{escalate_severity, run_episode, EpisodeEnv, EpisodeResult, Goal, Policy, StepRecord, Termination};
pub use io::{
    decode_dbimg, encode_dbimg, read_dbimg, read_image, read_png, write_dbimg, write_png, Dataset, Sample, DBIMG_MAGIC,
    LABELS_FILE,
};
pub use split::{
    intersect_indices, load_level, manifest_path, read_manifest, write_split, LevelRecord, ManifestHeader,
    ManifestRecord, SampleOutcome, SplitManifest, MANIFEST_FILE, PARTIAL_MARKER,
};

use crate::agent::{ActionSpace, Agent, DuelingQNet};
use crate::classifier::ClassifierHandle;
use crate::error::{invalid, Result};
use crate::filters::{calibrate, splitmix64, FilterBank, FilterId};
use crate::sensitivity::StateLayout;
use crate::tensor::{l2_distance, partition_patches};

/// Seed of the episode on sample `index`; `salt` separates training from generation.
pub fn episode_seed(run_seed: u64, index: usize, salt: u64) -> u64 {
    splitmix64(splitmix64(run_seed ^ salt) ^ index as u64)
}

const TRAIN_SALT: u64 = 0x7261_696e;
const GENERATE_SALT: u64 = 0x6765_6e65;

pub fn goal_from_config(config: &RunConfig) -> Goal {
    match config.mode {
        ModeName::Untargeted => Goal::Untargeted,
        ModeName::Targeted => Goal::Targeted(config.target_class.unwrap_or(0)),
        ModeName::Thresholds => Goal::Thresholds(
            config.threshold_classes.iter().copied().zip(config.threshold_probs.iter().copied()).collect(),
        ),
    }
}

/// The filter sets that each get their own split: every filter alone, or
/// all of them together in mixed mode.
pub fn filter_sets(config: &RunConfig, bank: &FilterBank) -> Result<Vec<(String, Vec<FilterId>)>> {
    let ids = config.filters.iter().map(|name| bank.resolve(name)).collect::<Result<Vec<_>>>()?;
    if config.mixed {
        Ok(vec![("mixed".to_string(), ids)])
    } else {
        Ok(ids.into_iter().map(|f| (bank.display_name(f), vec![f])).collect())
    }
}

/// The filter bank for `config`, calibrated on `dataset` when requested.
pub fn build_bank(config: &RunConfig, dataset: &Dataset) -> Result<FilterBank> {
    let mut params = config.filter_params();
    if config.calibrate {
        let grid = partition_patches(dataset.shape, config.patch_size)?;
        let images: Vec<_> = dataset.samples.iter().map(|s| (*s.image).clone()).collect();
        for name in &config.filters {
            let filter = FilterBank::new(params)?.resolve(name)?;
            let fitted = calibrate(filter, &params, &images, &grid, config.epsilon0, config.seed)?;
            log::info!("calibrated {filter} to per-application L2 {}", config.epsilon0);
            params = fitted;
        }
    }
    FilterBank::new(params)
}

pub fn build_env<'a>(
    config: &RunConfig,
    classifier: &'a ClassifierHandle,
    bank: &'a FilterBank,
    filters: Vec<FilterId>,
    dataset: &Dataset,
) -> Result<EpisodeEnv<'a>> {
    config.validate()?;
    Ok(EpisodeEnv {
        classifier,
        bank,
        grid: partition_patches(dataset.shape, config.patch_size)?,
        space: ActionSpace::new(filters)?,
        layout: StateLayout { top_k: config.state_k, num_classes: classifier.num_classes(), max_iter: config.max_iter },
        goal: goal_from_config(config),
        max_iter: config.max_iter,
        l2_budget: config.l2_budget,
        max_queries: config.max_queries,
        skip_misclassified: config.skip_misclassified,
        distortion_levels: config.distortion_levels.clone(),
        refine: config.refine,
    })
}

pub fn new_agent(config: &RunConfig, env: &EpisodeEnv<'_>) -> Result<Agent> {
    Agent::new(config.agent_config(), env.space.clone(), env.layout.len(), config.seed)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: usize,
    pub successes: usize,
    pub skipped: usize,
    pub agent_steps: u64,
    pub updates: u64,
    pub final_epsilon: f64,
    pub last_loss: Option<f64>,
}

/// Trains `agent` for `epochs` sequential passes over `dataset`.
pub fn train_agent(
    env: &EpisodeEnv<'_>,
    dataset: &Dataset,
    epochs: usize,
    agent: &mut Agent,
    seed: u64,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    for epoch in 0..epochs {
        for s in &dataset.samples {
            let ep_seed = episode_seed(seed, s.index, TRAIN_SALT ^ epoch as u64);
            let r = run_episode(env, s.image.clone(), s.label, ep_seed, &mut Policy::Learner(agent))?;
            report.episodes += 1;
            report.successes += usize::from(r.success);
            report.skipped += usize::from(r.termination == Termination::Skipped);
        }
        log::info!(
            "epoch {epoch}: {} episodes, {} successes, epsilon {:.3}",
            report.episodes,
            report.successes,
            agent.epsilon()
        );
    }
    report.agent_steps = agent.steps();
    report.updates = agent.updates();
    report.final_epsilon = agent.epsilon();
    report.last_loss = agent.last_loss();
    Ok(report)
}

/// Attacks every sample with a frozen policy, in parallel. Results come
/// back in dataset order and depend only on the seeds.
pub fn attack_dataset(
    env: &EpisodeEnv<'_>,
    dataset: &Dataset,
    net: &DuelingQNet,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let ep_seed = episode_seed(seed, s.index, GENERATE_SALT);
            let mut policy = Policy::Frozen { net, epsilon, rng: ChaCha8Rng::seed_from_u64(ep_seed) };
            run_episode(env, s.image.clone(), s.label, ep_seed, &mut policy)
        })
        .collect()
}

/// Expands successful episodes into severity levels and records the
/// victim's prediction on each.
pub fn build_outcomes(
    classifier: &ClassifierHandle,
    dataset: &Dataset,
    results: &[EpisodeResult],
    severities: &[f64],
    by_l2_level: bool,
) -> Result<Vec<SampleOutcome>> {
    if results.len() != dataset.samples.len() {
        return invalid("one episode result per sample is required");
    }
    dataset
        .samples
        .par_iter()
        .zip(results)
        .map(|(s, r)| {
            let mut levels = Vec::new();
            if r.success {
                let adv = r.adversarial.as_ref().expect("successful episodes carry an image");
                let images: Vec<(f64, _)> = if by_l2_level {
                    r.level_images.clone()
                } else {
                    severities.iter().map(|&m| Ok((m, escalate_severity(&s.image, adv, m)?))).collect::<Result<_>>()?
                };
                if !images.is_empty() {
                    let batch: Vec<_> = images.iter().map(|(_, img)| img.clone()).collect();
                    let preds = classifier.predict(&batch)?;
                    for ((m, img), p) in images.into_iter().zip(preds) {
                        let l2 = l2_distance(&img.quantized(), &s.image)?;
                        levels.push((m, img, l2, p.argmax()));
                    }
                }
            }
            Ok(SampleOutcome {
                index: s.index,
                label: s.label,
                clean_prediction: r.clean_prediction,
                success: r.success,
                termination: r.termination,
                steps: r.steps,
                evaluations: r.queries.evaluations,
                batches: r.queries.batches,
                l2: r.l2,
                levels,
            })
        })
        .collect()
}

/// Summary of one generated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub victim: String,
    pub filter: String,
    pub samples: usize,
    pub attempted: usize,
    pub successes: usize,
    pub attack_success_rate: f64,
    pub mean_l2: f64,
    pub max_l2: f64,
    pub mean_queries: f64,
    pub manifest: String,
    pub train: Option<TrainReport>,
}

/// Trains (or loads) an agent for one filter set, attacks the dataset and
/// writes `<out>/<victim>/<filter>/`.
pub fn generate_split(
    config: &RunConfig,
    classifier: &ClassifierHandle,
    bank: &FilterBank,
    dataset: &Dataset,
    set_name: &str,
    filters: Vec<FilterId>,
    out: &Path,
) -> Result<(SplitManifest, SplitSummary, Agent)> {
    let env = build_env(config, classifier, bank, filters, dataset)?;
    let (agent, train) = match &config.agent_checkpoint {
        Some(path) => {
            let (net, _) = DuelingQNet::read_checkpoint(std::fs::File::open(path)?)?;
            if net.dims().input != env.layout.len() || net.dims().actions != env.space.len() {
                return invalid(format!(
                    "checkpoint {path} has dimensions {:?}, this run needs input {} and {} actions",
                    net.dims(),
                    env.layout.len(),
                    env.space.len()
                ));
            }
            (Agent::from_net(config.agent_config(), env.space.clone(), net, config.seed), None)
        }
        None => {
            let mut agent = new_agent(config, &env)?;
            let report = train_agent(&env, dataset, config.train_epochs, &mut agent, config.seed)?;
            (agent, Some(report))
        }
    };
    let results = attack_dataset(&env, dataset, agent.net(), config.eval_epsilon, config.seed)?;
    let by_level = !config.distortion_levels.is_empty();
    let severities = if by_level { &config.distortion_levels } else { &config.severities };
    let outcomes = build_outcomes(classifier, dataset, &results, severities, by_level)?;
    let header = ManifestHeader {
        victim: classifier.id().to_string(),
        filter: set_name.to_string(),
        config_hash: config.hash(),
        severities: severities.clone(),
        by_l2_level: by_level,
    };
    let dir = out.join(classifier.id()).join(set_name);
    let manifest = write_split(&outcomes, &header, &dir)?;
    let summary = summarize(&manifest, &results, &dir.join(MANIFEST_FILE), train);
    Ok((manifest, summary, agent))
}

fn summarize(
    manifest: &SplitManifest,
    results: &[EpisodeResult],
    path: &Path,
    train: Option<TrainReport>,
) -> SplitSummary {
    let attempted: Vec<&EpisodeResult> = results.iter().filter(|r| r.termination != Termination::Skipped).collect();
    let ok: Vec<&EpisodeResult> = attempted.iter().copied().filter(|r| r.success).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let l2s: Vec<f64> = ok.iter().map(|r| r.l2).collect();
    let queries: Vec<f64> = attempted.iter().map(|r| r.queries.evaluations as f64).collect();
    SplitSummary {
        victim: manifest.header.victim.clone(),
        filter: manifest.header.filter.clone(),
        samples: results.len(),
        attempted: attempted.len(),
        successes: ok.len(),
        attack_success_rate: manifest.attack_success_rate(),
        mean_l2: mean(&l2s),
        max_l2: l2s.iter().copied().fold(0.0, f64::max),
        mean_queries: mean(&queries),
        manifest: path.display().to_string(),
        train,
    }
}
