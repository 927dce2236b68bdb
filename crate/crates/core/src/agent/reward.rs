use serde::{Deserialize, Serialize};

use crate::sensitivity::AttackMode;

/// Floor on `|ΔL2|` before dividing.
pub const EPS_DIV: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    /// Change of the objective: probability dilution `1 - P_gt` when
    /// untargeted, target probability when targeted.
    pub delta_objective: f64,
    pub delta_l2: f64,
    pub reward: f64,
}

/// Objective change per unit of L2 change.
///
/// Untargeted, the objective is `1 - P_gt`, so pushing the ground-truth
/// probability down earns positive reward. (The literature form writes a
/// leading minus sign on this ratio; with the dilution defined as
/// `1 - P_gt` that sign would reward helping the ground truth, so it is not
/// applied.) The denominator is `max(|ΔL2|, 1e-6)`, which keeps the sign of
/// the reward equal to the sign of the objective change even on
/// removal-dominated steps.
pub fn compute_reward(
    mode: AttackMode,
    p_tracked_before: f64,
    p_tracked_after: f64,
    l2_before: f64,
    l2_after: f64,
) -> RewardTerms {
    let delta_objective = match mode {
        AttackMode::Untargeted => (1.0 - p_tracked_after) - (1.0 - p_tracked_before),
        AttackMode::Targeted => p_tracked_after - p_tracked_before,
    };
    let delta_l2 = l2_after - l2_before;
    RewardTerms { delta_objective, delta_l2, reward: delta_objective / delta_l2.abs().max(EPS_DIV) }
}
