use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::classifier::DEFAULT_MAX_BATCH;
use crate::error::{invalid, Result};
use crate::filters::FilterParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Untargeted,
    Targeted,
    /// Reach per-class probability thresholds.
    Thresholds,
}

/// Every knob of a generation run, as one flat key-value document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ModeName,
    pub target_class: Option<usize>,
    pub threshold_classes: Vec<usize>,
    pub threshold_probs: Vec<f64>,

    pub max_iter: usize,
    pub l2_budget: Option<f64>,
    pub max_queries: Option<u64>,
    pub skip_misclassified: bool,
    /// Undo applications after success while the goal still holds.
    pub refine: bool,

    pub patch_size: usize,
    pub filters: Vec<String>,
    /// One agent choosing among all `filters` instead of one split per filter.
    pub mixed: bool,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub brightness_delta: f64,
    pub deadpixel_fraction: f64,
    pub epsilon0: f64,
    /// Fit every filter to `epsilon0` on the dataset before running.
    pub calibrate: bool,

    pub severities: Vec<f64>,
    /// L2 levels to continue distorting to after success. When non-empty
    /// they replace `severities`.
    pub distortion_levels: Vec<f64>,

    pub seed: u64,
    pub victim: Option<String>,
    pub victim_id: Option<String>,
    pub endpoint: Option<String>,
    pub dataset: Option<String>,
    pub max_batch: usize,

    pub state_k: usize,
    pub agent_checkpoint: Option<String>,
    /// Training passes over the dataset before generation when no checkpoint
    /// is given.
    pub train_epochs: usize,
    pub eval_epsilon: f64,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub target_sync: u64,
    pub lr: f64,
    pub hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let f = FilterParams::default();
        let a = AgentConfig::default();
        Self {
            mode: ModeName::Untargeted,
            target_class: None,
            threshold_classes: Vec::new(),
            threshold_probs: Vec::new(),
            max_iter: 3500,
            l2_budget: None,
            max_queries: None,
            skip_misclassified: true,
            refine: true,
            patch_size: 2,
            filters: vec!["gaussian_noise".into()],
            mixed: false,
            noise_sigma: f.noise_sigma,
            blur_sigma: f.blur_sigma,
            brightness_delta: f.brightness_delta,
            deadpixel_fraction: f.deadpixel_fraction,
            epsilon0: f.epsilon0,
            calibrate: false,
            severities: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            distortion_levels: Vec::new(),
            seed: 0,
            victim: None,
            victim_id: None,
            endpoint: None,
            dataset: None,
            max_batch: DEFAULT_MAX_BATCH,
            state_k: 32,
            agent_checkpoint: None,
            train_epochs: 1,
            eval_epsilon: 0.0,
            gamma: a.gamma,
            replay_capacity: a.replay_capacity,
            batch_size: a.batch_size,
            eps_start: a.eps_start,
            eps_end: a.eps_end,
            eps_decay_steps: a.eps_decay_steps,
            target_sync: a.target_sync,
            lr: a.lr,
            hidden: a.hidden,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return invalid("max_iter must be at least 1");
        }
        if self.patch_size == 0 {
            return invalid("patch_size must be positive");
        }
        if self.filters.is_empty() {
            return invalid("at least one filter is required");
        }
        if self.severities.first() != Some(&1.0) || self.severities.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("severities must start at 1 and be strictly ascending");
        }
        if self.distortion_levels.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.distortion_levels.windows(2).any(|w| w[0] >= w[1])
        {
            return invalid("distortion_levels must be positive and strictly ascending");
        }
        match self.mode {
            ModeName::Targeted if self.target_class.is_none() => {
                return invalid("targeted mode needs target_class");
            }
            ModeName::Thresholds => {
                if self.threshold_classes.is_empty() || self.threshold_classes.len() != self.threshold_probs.len() {
                    return invalid("threshold_classes and threshold_probs must be non-empty and equally long");
                }
                if self.threshold_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return invalid("threshold_probs must lie in [0, 1]");
                }
            }
            _ => {}
        }
        if let Some(b) = self.l2_budget {
            if b.is_nan() || b <= 0.0 {
                return invalid("l2_budget must be positive");
            }
        }
        if self.max_batch == 0 || self.state_k == 0 {
            return invalid("max_batch and state_k must be positive");
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return invalid("eval_epsilon must lie in [0, 1]");
        }
        self.filter_params().validate()?;
        self.agent_config().validate()
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            noise_sigma: self.noise_sigma,
            blur_sigma: self.blur_sigma,
            brightness_delta: self.brightness_delta,
            deadpixel_fraction: self.deadpixel_fraction,
            epsilon0: self.epsilon0,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma,
            replay_capacity: self.replay_capacity,
            batch_size: self.batch_size,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_decay_steps: self.eps_decay_steps,
            target_sync: self.target_sync,
            lr: self.lr,
            hidden: self.hidden,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash(), 16).expect("hex digest")
    }
}
