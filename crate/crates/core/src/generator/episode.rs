use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{compute_reward, select_action, ActionSpace, Agent, DuelingQNet, Transition};
use crate::classifier::{ClassifierHandle, ProbabilityVector, QueryCount, QueryCounter};
use crate::error::{invalid, Error, Result};
use crate::filters::{DistortionLedger, FilterBank, FilterId};
use crate::sensitivity::{build_state, scan, scan_cost, AttackMode, ScanInput, StateLayout};
use crate::tensor::{clip_unit, l2_distance, ImageTensor, PatchGrid};

/// What counts as a successful attack.
#[derive(Debug, Clone, PartialEq)]
pub enum Goal {
    /// Top-1 differs from the label.
    Untargeted,
    /// Top-1 equals the target.
    Targeted(usize),
    /// Every listed class reaches its probability.
    Thresholds(Vec<(usize, f64)>),
}

impl Goal {
    pub fn mode(&self) -> AttackMode {
        match self {
            Goal::Untargeted => AttackMode::Untargeted,
            _ => AttackMode::Targeted,
        }
    }

    pub fn reached(&self, probs: &ProbabilityVector, label: usize) -> bool {
        match self {
            Goal::Untargeted => probs.argmax() != label,
            Goal::Targeted(t) => probs.argmax() == *t,
            Goal::Thresholds(list) => list.iter().all(|&(c, p)| probs.get(c) >= p),
        }
    }

    /// The class whose probability the sensitivity scan follows.
    pub fn tracked_class(&self, probs: &ProbabilityVector, label: usize) -> usize {
        match self {
            Goal::Untargeted => label,
            Goal::Targeted(t) => *t,
            Goal::Thresholds(list) => {
                let mut best = list[0];
                for &(c, p) in &list[1..] {
                    if p - probs.get(c) > best.1 - probs.get(best.0) {
                        best = (c, p);
                    }
                }
                best.0
            }
        }
    }

    fn termination(&self) -> Termination {
        match self {
            Goal::Untargeted => Termination::Misclassified,
            Goal::Targeted(_) => Termination::TargetHit,
            Goal::Thresholds(_) => Termination::ThresholdHit,
        }
    }

    fn check_classes(&self, num_classes: usize, label: usize) -> Result<()> {
        let mut classes = vec![label];
        match self {
            Goal::Untargeted => {}
            Goal::Targeted(t) => classes.push(*t),
            Goal::Thresholds(list) => {
                if list.is_empty() {
                    return invalid("threshold goal needs at least one class");
                }
                classes.extend(list.iter().map(|&(c, _)| c));
            }
        }
        match classes.iter().find(|&&c| c >= num_classes) {
            Some(c) => invalid(format!("class {c} outside the victim's {num_classes} classes")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Misclassified,
    TargetHit,
    ThresholdHit,
    Budget,
    MaxIter,
    /// The clean image was already misclassified.
    Skipped,
    /// The victim could not be reached or answered malformed data.
    TransportFailure,
}

impl Termination {
    pub fn is_success(self) -> bool {
        matches!(self, Termination::Misclassified | Termination::TargetHit | Termination::ThresholdHit)
    }
}

/// Per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: usize,
    pub n_add: usize,
    pub n_rem: usize,
    pub filter: FilterId,
    pub distorted_pairs_before: usize,
    pub scan_evaluations: u64,
    pub confirm_evaluations: u64,
    pub l2: f64,
    pub tracked_prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub success: bool,
    pub termination: Termination,
    pub clean_prediction: Option<usize>,
    /// The final render (the adversarial image on success).
    pub adversarial: Option<ImageTensor>,
    pub l2: f64,
    pub steps: usize,
    pub queries: QueryCount,
    pub final_probs: Option<ProbabilityVector>,
    pub log: Vec<StepRecord>,
    /// For L2-level runs, the first image at or beyond each level reached.
    pub level_images: Vec<(f64, ImageTensor)>,
    /// Applications undone after success.
    pub refine_rounds: usize,
    pub refine_evaluations: u64,
}

/// Fixed pieces of the environment shared by all episodes of a run.
#[derive(Debug, Clone)]
pub struct EpisodeEnv<'a> {
    pub classifier: &'a ClassifierHandle,
    pub bank: &'a FilterBank,
    pub grid: PatchGrid,
    pub space: ActionSpace,
    pub layout: StateLayout,
    pub goal: Goal,
    pub max_iter: usize,
    pub l2_budget: Option<f64>,
    pub max_queries: Option<u64>,
    pub skip_misclassified: bool,
    pub distortion_levels: Vec<f64>,
    /// Undo applications after success while the goal still holds.
    pub refine: bool,
}

/// Where actions come from.
pub enum Policy<'a> {
    /// Explores on the agent's schedule and learns from every transition.
    Learner(&'a mut Agent),
    /// Fixed weights, fixed exploration rate.
    Frozen { net: &'a DuelingQNet, epsilon: f64, rng: ChaCha8Rng },
    /// Always the same action index.
    Fixed(usize),
}

impl Policy<'_> {
    fn select(&mut self, state: &[f64], valid: &[bool]) -> Result<usize> {
        match self {
            Policy::Learner(agent) => agent.act_training(state, valid),
            Policy::Frozen { net, epsilon, rng } => select_action(net, state, valid, *epsilon, rng),
            Policy::Fixed(a) => {
                if valid.get(*a).copied().unwrap_or(false) {
                    Ok(*a)
                } else {
                    Err(Error::Precondition(format!("fixed action {a} is not valid here")))
                }
            }
        }
    }

    fn learn(&mut self, t: Transition) -> Result<()> {
        if let Policy::Learner(agent) = self {
            agent.observe(t)?;
        }
        Ok(())
    }
}

/// Scales the total perturbation: `clip(original + s * (adv - original))`.
pub fn escalate_severity(original: &ImageTensor, adversarial: &ImageTensor, s: f64) -> Result<ImageTensor> {
    if original.shape() != adversarial.shape() {
        return invalid(format!("shape mismatch: {} vs {}", original.shape(), adversarial.shape()));
    }
    if !(s.is_finite() && s >= 1.0) {
        return invalid(format!("severity multiplier {s} must be at least 1"));
    }
    if s == 1.0 {
        return Ok(adversarial.clone());
    }
    let data = original.data().iter().zip(adversarial.data()).map(|(o, a)| o + s * (a - o)).collect();
    clip_unit(original.shape(), data)
}

fn is_victim_failure(e: &Error) -> bool {
    matches!(e, Error::Transport(_) | Error::Protocol(_))
}

struct Refined<'a> {
    ledger: &'a mut DistortionLedger,
    current: &'a mut ImageTensor,
    probs: &'a mut ProbabilityVector,
    l2: &'a mut f64,
}

/// Repeatedly evaluates every single-application removal as one batch and
/// keeps the one that lowers L2 the most while the goal still holds
/// (ties: the one leaving the goal most firmly held, then candidate order).
/// Stops when no removal qualifies. Returns the number of removals kept.
fn refine(
    env: &EpisodeEnv<'_>,
    original: &ImageTensor,
    label: usize,
    s: &mut Refined<'_>,
    counter: &QueryCounter,
) -> Result<usize> {
    let mode = env.goal.mode();
    let mut rounds = 0;
    loop {
        let pairs: Vec<(usize, FilterId)> = s.ledger.distorted_pairs().map(|(pair, _)| pair).collect();
        if pairs.is_empty() {
            break;
        }
        if env.max_queries.is_some_and(|m| counter.snapshot().evaluations + pairs.len() as u64 > m) {
            break;
        }
        let candidates = pairs
            .par_iter()
            .map(|&(p, f)| s.ledger.candidate(env.bank, s.current, p, f, -1))
            .collect::<Result<Vec<_>>>()?;
        let outputs = env.classifier.predict_tracked(&candidates, Some(counter))?;
        let tracked = env.goal.tracked_class(s.probs, label);
        let mut best: Option<(usize, f64)> = None;
        for (i, (img, out)) in candidates.iter().zip(&outputs).enumerate() {
            if !env.goal.reached(out, label) {
                continue;
            }
            let l2 = l2_distance(img, original)?;
            let better = match best {
                None => true,
                Some((b, bl2)) => {
                    let firmer = match mode {
                        AttackMode::Untargeted => out.get(tracked) < outputs[b].get(tracked),
                        AttackMode::Targeted => out.get(tracked) > outputs[b].get(tracked),
                    };
                    l2 < bl2 || (l2 == bl2 && firmer)
                }
            };
            if better {
                best = Some((i, l2));
            }
        }
        match best {
            Some((i, l2)) if l2 < *s.l2 => {
                let (p, f) = pairs[i];
                s.ledger.remove(p, f)?;
                *s.current = candidates[i].clone();
                *s.probs = outputs[i].clone();
                *s.l2 = l2;
                rounds += 1;
            }
            _ => break,
        }
    }
    Ok(rounds)
}

struct Pending {
    state: Vec<f64>,
    action: usize,
    reward: f64,
}

/// Runs one attack episode on `image`.
///
/// Victim failures end the episode with [`Termination::TransportFailure`]
/// instead of an error; everything else propagates.
pub fn run_episode(
    env: &EpisodeEnv<'_>,
    image: Arc<ImageTensor>,
    label: usize,
    seed: u64,
    policy: &mut Policy<'_>,
) -> Result<EpisodeResult> {
    let counter = QueryCounter::new();
    let mut result = EpisodeResult {
        success: false,
        termination: Termination::MaxIter,
        clean_prediction: None,
        adversarial: None,
        l2: 0.0,
        steps: 0,
        queries: QueryCount::default(),
        final_probs: None,
        log: Vec::new(),
        level_images: Vec::new(),
        refine_rounds: 0,
        refine_evaluations: 0,
    };
    match attack(env, image, label, seed, policy, &counter, &mut result) {
        Ok(()) => {}
        Err(e) if is_victim_failure(&e) => {
            log::warn!("episode aborted by victim failure: {e}");
            result.success = false;
            result.termination = Termination::TransportFailure;
        }
        Err(e) => return Err(e),
    }
    result.queries = counter.snapshot();
    Ok(result)
}

fn attack(
    env: &EpisodeEnv<'_>,
    image: Arc<ImageTensor>,
    label: usize,
    seed: u64,
    policy: &mut Policy<'_>,
    counter: &QueryCounter,
    result: &mut EpisodeResult,
) -> Result<()> {
    env.goal.check_classes(env.classifier.num_classes(), label)?;
    let filters = env.space.filters().to_vec();
    let mode = env.goal.mode();
    let mut ledger = DistortionLedger::new(Arc::clone(&image), env.grid, seed)?;
    let mut current = (*image).clone();
    let mut probs = env.classifier.predict_tracked(std::slice::from_ref(&current), Some(counter))?.remove(0);
    result.clean_prediction = Some(probs.argmax());
    result.adversarial = Some(current.clone());
    result.final_probs = Some(probs.clone());

    if env.skip_misclassified && probs.argmax() != label {
        result.termination = Termination::Skipped;
        return Ok(());
    }
    if env.goal.reached(&probs, label) {
        result.success = true;
        result.termination = env.goal.termination();
        return Ok(());
    }

    let mut l2 = 0.0;
    let mut pending: Option<Pending> = None;
    let mut levels = env.distortion_levels.iter().copied().peekable();
    let mut succeeded = false;
    let mut step = 0;
    while step < env.max_iter {
        let tracked = env.goal.tracked_class(&probs, label);
        if let Some(limit) = env.max_queries {
            let next = counter.snapshot().evaluations + scan_cost(&ledger, &filters) as u64 + 1;
            if next > limit {
                result.termination = Termination::Budget;
                break;
            }
        }
        let before = counter.snapshot();
        let distorted_before = ledger.num_distorted_pairs();
        let lists = scan(
            ScanInput {
                ledger: &ledger,
                bank: env.bank,
                current: &current,
                current_probs: &probs,
                filters: &filters,
                tracked_class: tracked,
                mode,
            },
            env.classifier,
            Some(counter),
        )?;
        let scanned = counter.snapshot() - before;
        let state = build_state(&lists, &probs, tracked, l2, step, &env.layout).0;
        let mut valid = env.space.valid_mask(lists.minus.len());
        if succeeded {
            // Past success only growth toward the next L2 level is allowed.
            for (i, v) in valid.iter_mut().enumerate() {
                *v &= env.space.decode(i).n_rem == 0;
            }
        }
        if let Some(p) = pending.take() {
            policy.learn(Transition {
                state: p.state,
                action: p.action,
                reward: p.reward,
                next_state: state.clone(),
                next_valid: valid.clone(),
                done: false,
            })?;
        }

        let action = policy.select(&state, &valid)?;
        if !valid[action] {
            return Err(Error::Precondition(format!("policy chose invalid action {action}")));
        }
        let spec = env.space.decode(action);
        let adds: Vec<(usize, FilterId)> = lists
            .plus
            .iter()
            .filter(|e| e.filter == spec.filter)
            .take(spec.n_add)
            .map(|e| (e.patch_id, e.filter))
            .collect();
        let added: BTreeSet<(usize, FilterId)> = adds.iter().copied().collect();
        let removes: Vec<(usize, FilterId)> = lists
            .minus
            .iter()
            .map(|e| (e.patch_id, e.filter))
            .filter(|pair| !added.contains(pair))
            .take(spec.n_rem)
            .collect();
        for &(p, f) in &removes {
            ledger.remove(p, f)?;
        }
        for &(p, f) in &adds {
            ledger.add(p, f)?;
        }
        current = ledger.render(env.bank)?;
        let confirm_before = counter.snapshot();
        let next_probs = env.classifier.predict_tracked(std::slice::from_ref(&current), Some(counter))?.remove(0);
        let confirmed = counter.snapshot() - confirm_before;
        let next_l2 = l2_distance(&current, &image)?;
        let reward = compute_reward(mode, probs.get(tracked), next_probs.get(tracked), l2, next_l2);
        step += 1;
        result.log.push(StepRecord {
            step,
            action,
            n_add: adds.len(),
            n_rem: removes.len(),
            filter: spec.filter,
            distorted_pairs_before: distorted_before,
            scan_evaluations: scanned.evaluations,
            confirm_evaluations: confirmed.evaluations,
            l2: next_l2,
            tracked_prob: next_probs.get(tracked),
            reward: reward.reward,
        });
        probs = next_probs;
        l2 = next_l2;

        let mut done = false;
        if !succeeded && env.goal.reached(&probs, label) {
            succeeded = true;
            if env.refine {
                let before = counter.snapshot();
                let mut state = Refined { ledger: &mut ledger, current: &mut current, probs: &mut probs, l2: &mut l2 };
                result.refine_rounds = refine(env, &image, label, &mut state, counter)?;
                result.refine_evaluations = (counter.snapshot() - before).evaluations;
            }
            result.success = true;
            result.termination = env.goal.termination();
            result.adversarial = Some(current.clone());
            result.final_probs = Some(probs.clone());
            result.l2 = l2;
            result.steps = step;
            done = levels.peek().is_none();
        }
        if succeeded {
            while let Some(&level) = levels.peek() {
                if l2 < level {
                    break;
                }
                result.level_images.push((level, current.clone()));
                levels.next();
            }
            done |= levels.peek().is_none();
        } else if env.l2_budget.is_some_and(|b| l2 >= b) {
            result.termination = Termination::Budget;
            done = true;
        }
        if done || step == env.max_iter {
            policy.learn(Transition {
                state: state.clone(),
                action,
                reward: reward.reward,
                next_state: state,
                next_valid: valid,
                done: true,
            })?;
            break;
        }
        pending = Some(Pending { state, action, reward: reward.reward });
    }

    if !succeeded {
        result.adversarial = Some(current);
        result.final_probs = Some(probs);
        result.l2 = l2;
        result.steps = step;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ConstantClassifier, ToyLinear};
    use crate::filters::FilterParams;
    use crate::sensitivity::StateLayout;
    use crate::tensor::{partition_patches, Shape};
    use proptest::prelude::*;

    fn env<'a>(
        handle: &'a ClassifierHandle,
        bank: &'a FilterBank,
        filter: FilterId,
        max_iter: usize,
    ) -> EpisodeEnv<'a> {
        let shape = Shape::new(1, 4, 4);
        EpisodeEnv {
            classifier: handle,
            bank,
            grid: partition_patches(shape, 2).unwrap(),
            space: ActionSpace::new(vec![filter]).unwrap(),
            layout: StateLayout { top_k: 4, num_classes: handle.num_classes(), max_iter },
            goal: Goal::Untargeted,
            max_iter,
            l2_budget: None,
            max_queries: None,
            skip_misclassified: true,
            distortion_levels: vec![],
            refine: false,
        }
    }

    #[test]
    fn unattackable_victim_runs_out_of_iterations() {
        let handle = ClassifierHandle::new("const", Arc::new(ConstantClassifier::certain(3, 1).unwrap()));
        let bank = FilterBank::new(FilterParams::default()).unwrap();
        let e = env(&handle, &bank, FilterId::GaussianNoise, 7);
        let img = Arc::new(ImageTensor::filled(Shape::new(1, 4, 4), 0.5).unwrap());
        let r = run_episode(&e, img, 1, 3, &mut Policy::Fixed(0)).unwrap();
        assert!(!r.success);
        assert_eq!(r.termination, Termination::MaxIter);
        assert_eq!(r.steps, 7);
        assert_eq!(r.log.len(), 7);
    }

    #[test]
    fn misclassified_clean_image_is_skipped() {
        let handle = ClassifierHandle::new("const", Arc::new(ConstantClassifier::certain(3, 2).unwrap()));
        let bank = FilterBank::new(FilterParams::default()).unwrap();
        let e = env(&handle, &bank, FilterId::GaussianNoise, 5);
        let img = Arc::new(ImageTensor::filled(Shape::new(1, 4, 4), 0.5).unwrap());
        let r = run_episode(&e, img, 0, 0, &mut Policy::Fixed(0)).unwrap();
        assert_eq!(r.termination, Termination::Skipped);
        assert_eq!(r.queries.evaluations, 1);
    }

    fn brightness_victim() -> ToyLinear {
        // Class 1 gains as the image darkens.
        let w0 = vec![1.0; 16];
        let w1 = vec![0.0; 16];
        ToyLinear::new([w0, w1].concat(), vec![-5.0, 2.0]).unwrap()
    }

    #[test]
    fn query_count_per_step_is_scan_plus_confirmation() {
        let handle = ClassifierHandle::new("toy", Arc::new(brightness_victim()));
        let bank = FilterBank::new(FilterParams::default()).unwrap();
        let e = env(&handle, &bank, FilterId::Brightness, 50);
        let img = Arc::new(ImageTensor::filled(Shape::new(1, 4, 4), 0.5).unwrap());
        let r = run_episode(&e, img, 0, 1, &mut Policy::Fixed(0)).unwrap();
        assert!(r.success, "{:?}", r.termination);
        for s in &r.log {
            assert_eq!(s.scan_evaluations, (4 + s.distorted_pairs_before) as u64);
            assert_eq!(s.confirm_evaluations, 1);
        }
        let total: u64 = r.log.iter().map(|s| s.scan_evaluations + s.confirm_evaluations).sum();
        assert_eq!(r.queries.evaluations, total + 1);
    }

    #[test]
    fn success_image_reproduces_the_outcome() {
        let handle = ClassifierHandle::new("toy", Arc::new(brightness_victim()));
        let bank = FilterBank::new(FilterParams::default()).unwrap();
        let e = env(&handle, &bank, FilterId::Brightness, 50);
        let img = Arc::new(ImageTensor::filled(Shape::new(1, 4, 4), 0.5).unwrap());
        let r = run_episode(&e, img.clone(), 0, 1, &mut Policy::Fixed(4 * 4)).unwrap();
        assert!(r.success);
        let adv = r.adversarial.unwrap();
        assert_ne!(handle.predict_one(&adv).unwrap().argmax(), 0);
        assert!((l2_distance(&adv, &img).unwrap() - r.l2).abs() < 1e-12);
    }

    #[test]
    fn query_budget_stops_before_overrun() {
        let handle = ClassifierHandle::new("const", Arc::new(ConstantClassifier::certain(2, 0).unwrap()));
        let bank = FilterBank::new(FilterParams::default()).unwrap();
        let mut e = env(&handle, &bank, FilterId::Brightness, 100);
        e.max_queries = Some(20);
        let img = Arc::new(ImageTensor::filled(Shape::new(1, 4, 4), 0.5).unwrap());
        let r = run_episode(&e, img, 0, 1, &mut Policy::Fixed(0)).unwrap();
        assert_eq!(r.termination, Termination::Budget);
        assert!(r.queries.evaluations <= 20);
    }

    #[test]
    fn escalation_identity_and_linearity() {
        let shape = Shape::new(1, 2, 2);
        let orig = ImageTensor::new(shape, vec![0.4, 0.5, 0.45, 0.55]).unwrap();
        let adv = ImageTensor::new(shape, vec![0.41, 0.48, 0.45, 0.56]).unwrap();
        let one = escalate_severity(&orig, &adv, 1.0).unwrap();
        assert!(one.data().iter().zip(adv.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let base = l2_distance(&adv, &orig).unwrap();
        for s in [2.0, 3.0, 4.0, 5.0] {
            let l = l2_distance(&escalate_severity(&orig, &adv, s).unwrap(), &orig).unwrap();
            assert!((l - s * base).abs() < 1e-9);
        }
        assert!(escalate_severity(&orig, &adv, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn saturated_escalation_never_exceeds_linear(
            pairs in proptest::collection::vec((0.0f64..=1.0, -0.6f64..0.6), 1..32),
            s in 1.0f64..6.0
        ) {
            let shape = Shape::new(1, 1, pairs.len());
            let orig: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let adv: Vec<f64> = pairs.iter().map(|p| (p.0 + p.1).clamp(0.0, 1.0)).collect();
            let orig = ImageTensor::new(shape, orig).unwrap();
            let adv = ImageTensor::new(shape, adv).unwrap();
            let base = l2_distance(&adv, &orig).unwrap();
            let scaled = escalate_severity(&orig, &adv, s).unwrap();
            // Direct recomputation of the unclipped scaling.
            let free: f64 = orig.data().iter().zip(adv.data())
                .map(|(o, a)| (s * (a - o)).powi(2)).sum::<f64>().sqrt();
            let got = l2_distance(&scaled, &orig).unwrap();
            prop_assert!(got <= free + 1e-12);
            prop_assert!(got <= s * base + 1e-9);
        }
    }
}
