//! Group-relative policy optimization for the catalog policy.
//!
//! Each update samples `G` trajectories per question from the frozen policy
//! `π_old`, standardizes their total rewards within the group, and ascends
//!
//! `J(θ) = mean_groups mean_i mean_t min(r_it A_i, clip(r_it, 1-ε, 1+ε) A_i) - β KL(π_θ ‖ π_ref)`
//!
//! where `r_it = π_θ(a_t | s_t) / π_old(a_t | s_t)` and the KL term is the
//! exact categorical divergence averaged over every visited decision state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::TransitionKind;
use crate::policy::{
    action_distribution, argmax, featurize, render_catalog_action, sample_index, CatalogAction,
    FeatureVector, Gradient, PolicyError, PolicyParams, CATALOG_SIZE,
};
use crate::protocol::Transcript;
use crate::rewards::{score_transcript, RewardBreakdown, RewardConfig};
use crate::scenes::{Category, EpisodeConfig, EpisodeState, Question, SceneRecord, SceneSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at update {0}")]
    NonFiniteGradient(usize),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub delta: f64,
    pub lr: f64,
    pub groups_per_update: usize,
    pub updates: usize,
    /// Gradient steps taken on each batch before `π_old` is refreshed.
    pub inner_epochs: usize,
    pub std_kind: StdKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon: 0.2,
            beta: 0.01,
            delta: 1e-6,
            lr: 0.05,
            groups_per_update: 16,
            updates: 100,
            inner_epochs: 1,
            std_kind: StdKind::Population,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_owned()));
        if self.group_size < 1 {
            return bad("group_size must be >= 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be > 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if self.groups_per_update < 1 {
            return bad("groups_per_update must be >= 1");
        }
        if self.inner_epochs < 1 {
            return bad("inner_epochs must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub features: FeatureVector,
    pub action: usize,
    pub log_prob_old: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub question_id: String,
    pub category: Category,
    pub transcript: Transcript,
    pub decisions: Vec<Decision>,
    pub breakdown: RewardBreakdown,
    pub correct: bool,
    /// Transition kinds between consecutive executed views.
    pub transitions: Vec<TransitionKind>,
}

impl TrajectoryRecord {
    pub fn reward(&self) -> f64 {
        self.breakdown.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub question_id: String,
    pub records: Vec<TrajectoryRecord>,
    pub advantages: Vec<f64>,
}

/// How an actor turns a distribution into a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    #[default]
    Sample,
    Greedy,
}

/// Something that picks catalog actions in an episode.
#[derive(Debug, Clone)]
pub enum Actor<'a> {
    Softmax { params: &'a PolicyParams, decode: Decode },
    /// Guesses an option uniformly without zooming.
    UniformAnswer,
    /// Always answers option `A` immediately.
    AlwaysAnswer,
    /// Keeps zooming into the centre cell of the current view.
    AlwaysZoom,
}

impl Actor<'_> {
    /// Chosen catalog index and its probability under this actor.
    fn choose(&self, state: &EpisodeState, x: &FeatureVector, rng: &mut ChaCha8Rng) -> Result<(usize, f64), PolicyError> {
        Ok(match self {
            Actor::Softmax { params, decode } => {
                let p = action_distribution(params, x)?;
                let a = match decode {
                    Decode::Sample => sample_index(&p, rng),
                    Decode::Greedy => argmax(&p),
                };
                (a, p[a])
            }
            Actor::UniformAnswer => {
                let n = state.question.options.len();
                (rng.random_range(0..n), 1.0 / n as f64)
            }
            Actor::AlwaysAnswer => (CatalogAction::Answer(0).index(), 1.0),
            Actor::AlwaysZoom => (CatalogAction::LocalZoom(4).index(), 1.0),
        })
    }
}

/// Episode and reward settings shared by every rollout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvConfig {
    pub episode: EpisodeConfig,
    pub rewards: RewardConfig,
}

/// Run one episode to termination.
pub fn rollout(
    actor: &Actor<'_>,
    scene: &SceneSpec,
    question: &Question,
    env: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryRecord, PolicyError> {
    let mut state = EpisodeState::new(scene.clone(), question.clone(), env.episode);
    let mut decisions = Vec::new();
    let mut transitions = Vec::new();
    while !state.terminal {
        let x = featurize(&state);
        let (a, p) = actor.choose(&state, &x, rng)?;
        let action = render_catalog_action(&state, CatalogAction::from_index(a).expect("catalog index"));
        let before = state.round;
        state.step("", &action).expect("episode is live");
        if state.round > before && state.round > 1 {
            transitions.extend(state.last_transition);
        }
        decisions.push(Decision {
            features: x,
            action: a,
            log_prob_old: p.ln(),
        });
    }
    let breakdown = score_transcript(&state.transcript, scene, question, &env.rewards);
    Ok(TrajectoryRecord {
        question_id: question.question_id.clone(),
        category: question.category,
        correct: state.correct(),
        transcript: state.transcript,
        decisions,
        breakdown,
        transitions,
    })
}

/// `G` trajectories on one question from `π_old`, with standardized advantages.
pub fn rollout_group(
    params_old: &PolicyParams,
    env_seed: u64,
    record: &SceneRecord,
    group_size: usize,
    env: &EnvConfig,
    std_kind: StdKind,
    delta: f64,
) -> Result<Group, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
    let actor = Actor::Softmax {
        params: params_old,
        decode: Decode::Sample,
    };
    let records = (0..group_size)
        .map(|_| rollout(&actor, &record.scene, &record.question, env, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let rewards: Vec<f64> = records.iter().map(TrajectoryRecord::reward).collect();
    Ok(Group {
        question_id: record.question.question_id.clone(),
        advantages: standardize_with(&rewards, delta, std_kind),
        records,
    })
}

/// `(R_i - mean) / (std + δ)` with the population standard deviation.
pub fn standardize_advantages(rewards: &[f64], delta: f64) -> Vec<f64> {
    standardize_with(rewards, delta, StdKind::Population)
}

pub fn standardize_with(rewards: &[f64], delta: f64, kind: StdKind) -> Vec<f64> {
    let n = rewards.len();
    // An all-equal group carries no signal; avoid rounding noise in the mean.
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => n as f64,
        StdKind::Sample => (n.max(2) - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + delta)).collect()
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Whether the unclipped branch is active, so the surrogate depends on the ratio.
fn surrogate_is_live(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    (advantage > 0.0 && ratio < 1.0 + epsilon) || (advantage < 0.0 && ratio > 1.0 - epsilon)
}

/// Exact `KL(p ‖ q) = Σ p log(p / q)`.
pub fn kl_categorical(p: &[f64; CATALOG_SIZE], q: &[f64; CATALOG_SIZE]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>()
        .max(0.0)
}

pub fn kl_to_reference(params: &PolicyParams, reference: &PolicyParams, states: &[FeatureVector]) -> Result<f64, GrpoError> {
    if states.is_empty() {
        return Err(GrpoError::Empty("state sample"));
    }
    let mut total = 0.0;
    for x in states {
        total += kl_categorical(&action_distribution(params, x)?, &action_distribution(reference, x)?);
    }
    Ok(total / states.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

/// The GRPO objective over a fixed batch of groups.
pub struct Objective<'a> {
    pub groups: &'a [Group],
    pub reference: &'a PolicyParams,
    pub epsilon: f64,
    pub beta: f64,
}

impl Objective<'_> {
    /// Objective value and its exact gradient at `params`.
    pub fn evaluate(&self, params: &PolicyParams) -> Result<(ObjectiveValue, Gradient), GrpoError> {
        if self.groups.is_empty() {
            return Err(GrpoError::Empty("batch of groups"));
        }
        let mut grad = Gradient::zeros();
        let mut surrogate = 0.0;
        let mut kl_total = 0.0;
        let mut n_states = 0usize;
        let mut clipped = 0usize;
        let n_groups = self.groups.len() as f64;
        // Surrogate term.
        for g in self.groups {
            let g_size = g.records.len().max(1) as f64;
            for (rec, &adv) in g.records.iter().zip(&g.advantages) {
                let t_len = rec.decisions.len().max(1) as f64;
                let weight = 1.0 / (n_groups * g_size * t_len);
                for d in &rec.decisions {
                    let p = action_distribution(params, &d.features)?;
                    let ratio = (p[d.action].ln() - d.log_prob_old).exp();
                    surrogate += weight * clipped_surrogate(ratio, adv, self.epsilon);
                    if surrogate_is_live(ratio, adv, self.epsilon) {
                        // ∇(r A) = r A ∇log π(a|s) = r A (onehot(a) - p) ⊗ x
                        let mut coef = p.map(|v| -v);
                        coef[d.action] += 1.0;
                        grad.add_outer(&coef, &d.features, weight * ratio * adv);
                    } else if adv != 0.0 {
                        clipped += 1;
                    }
                    n_states += 1;
                }
            }
        }
        // KL term, averaged over every decision state in the batch.
        {
            let scale = 1.0 / n_states.max(1) as f64;
            for g in self.groups {
                for rec in &g.records {
                    for d in &rec.decisions {
                        let p = action_distribution(params, &d.features)?;
                        let q = action_distribution(self.reference, &d.features)?;
                        let kl = kl_categorical(&p, &q);
                        kl_total += kl;
                        if self.beta > 0.0 {
                            // ∂KL/∂logit_j = p_j (log p_j - log q_j - KL)
                            let coef: [f64; CATALOG_SIZE] =
                                std::array::from_fn(|j| if p[j] > 0.0 { p[j] * (p[j].ln() - q[j].ln() - kl) } else { 0.0 });
                            grad.add_outer(&coef, &d.features, -self.beta * scale);
                        }
                    }
                }
            }
            kl_total *= scale;
        }
        let value = ObjectiveValue {
            objective: surrogate - self.beta * kl_total,
            surrogate,
            kl: kl_total,
            clip_fraction: clipped as f64 / n_states.max(1) as f64,
        };
        Ok((value, grad))
    }

    pub fn value(&self, params: &PolicyParams) -> Result<f64, GrpoError> {
        Ok(self.evaluate(params)?.0.objective)
    }
}

/// Statistics of one parameter update, one line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
    pub objective: f64,
    pub grad_max_abs: f64,
    pub accuracy: f64,
    pub trigger_ratio: f64,
    pub mean_calls: f64,
}

/// One GRPO update from `params` (which must equal `π_old`) on `groups`.
pub fn grpo_update(
    params: &PolicyParams,
    groups: &[Group],
    config: &TrainConfig,
    reference: &PolicyParams,
) -> Result<(PolicyParams, UpdateStats), GrpoError> {
    grpo_update_at(params, groups, config, reference, 0)
}

fn grpo_update_at(
    params: &PolicyParams,
    groups: &[Group],
    config: &TrainConfig,
    reference: &PolicyParams,
    update: usize,
) -> Result<(PolicyParams, UpdateStats), GrpoError> {
    let objective = Objective {
        groups,
        reference,
        epsilon: config.epsilon,
        beta: config.beta,
    };
    let mut current = params.clone();
    let mut first: Option<(ObjectiveValue, f64)> = None;
    for _ in 0..config.inner_epochs {
        let (value, grad) = objective.evaluate(&current)?;
        if !grad.is_finite() {
            return Err(GrpoError::NonFiniteGradient(update));
        }
        first.get_or_insert((value, grad.max_abs()));
        current.add_scaled(&grad, config.lr);
    }
    let (value, grad_max_abs) = first.expect("inner_epochs >= 1");
    let records: Vec<&TrajectoryRecord> = groups.iter().flat_map(|g| &g.records).collect();
    let n = records.len().max(1) as f64;
    let stats = UpdateStats {
        update,
        mean_reward: records.iter().map(|r| r.reward()).sum::<f64>() / n,
        mean_abs_advantage: groups.iter().flat_map(|g| &g.advantages).map(|a| a.abs()).sum::<f64>() / n,
        kl: value.kl,
        clip_fraction: value.clip_fraction,
        surrogate: value.surrogate,
        objective: value.objective,
        grad_max_abs,
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
        trigger_ratio: records.iter().filter(|r| r.breakdown.n_step > 0).count() as f64 / n,
        mean_calls: records.iter().map(|r| r.breakdown.n_step as f64).sum::<f64>() / n,
    };
    Ok((current, stats))
}

/// Per-trajectory reward record for the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub update: usize,
    pub group: usize,
    pub index: usize,
    pub question_id: String,
    pub category: Category,
    pub correct: bool,
    pub advantage: f64,
    pub breakdown: RewardBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub updates: Vec<UpdateStats>,
    pub trajectories: Vec<TrajectoryLog>,
}

/// Full training loop. Rollouts fan out over the current rayon pool; each
/// group draws from its own derived seed, so results do not depend on the
/// number of threads.
pub fn train(
    init: &PolicyParams,
    reference: &PolicyParams,
    corpus: &[SceneRecord],
    config: &TrainConfig,
    env: &EnvConfig,
    mut on_update: impl FnMut(&UpdateStats, &PolicyParams),
) -> Result<TrainOutcome, GrpoError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(GrpoError::Empty("training corpus"));
    }
    let mut params = init.clone();
    let mut updates = Vec::with_capacity(config.updates);
    let mut trajectories = Vec::new();
    for u in 0..config.updates {
        let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[u as u64, 0]));
        let chosen: Vec<usize> = (0..config.groups_per_update)
            .map(|_| pick.random_range(0..corpus.len()))
            .collect();
        let groups = chosen
            .par_iter()
            .enumerate()
            .map(|(g, &qi)| {
                let seed = derive_seed(config.seed, &[u as u64, 1, g as u64]);
                rollout_group(&params, seed, &corpus[qi], config.group_size, env, config.std_kind, config.delta)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (next, stats) = grpo_update_at(&params, &groups, config, reference, u)?;
        for (gi, g) in groups.iter().enumerate() {
            for (i, (rec, adv)) in g.records.iter().zip(&g.advantages).enumerate() {
                trajectories.push(TrajectoryLog {
                    update: u,
                    group: gi,
                    index: i,
                    question_id: rec.question_id.clone(),
                    category: rec.category,
                    correct: rec.correct,
                    advantage: *adv,
                    breakdown: rec.breakdown,
                });
            }
        }
        tracing::debug!(update = u, reward = stats.mean_reward, kl = stats.kl, "grpo update");
        on_update(&stats, &next);
        updates.push(stats);
        params = next;
    }
    Ok(TrainOutcome {
        params,
        updates,
        trajectories,
    })
}

/// Roll out `actor` once on every corpus record, in parallel, each episode
/// seeded from `seed` and its position.
pub fn evaluate_actor(
    actor: &Actor<'_>,
    corpus: &[SceneRecord],
    env: &EnvConfig,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>, PolicyError> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            rollout(actor, &r.scene, &r.question, env, &mut rng)
        })
        .collect()
}

/// Central-difference check of `analytic` against `loss` on `coords`
/// randomly chosen coordinates; returns the largest relative discrepancy.
pub fn finite_difference_check(
    loss: &dyn Fn(&PolicyParams) -> f64,
    analytic: &Gradient,
    params: &PolicyParams,
    h: f64,
    coords: usize,
    rng: &mut impl Rng,
) -> Result<f64, GrpoError> {
    if !(h > 0.0) {
        return Err(GrpoError::InvalidStep(h));
    }
    let dim = params.weights[0].len();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let (r, c) = (rng.random_range(0..params.weights.len()), rng.random_range(0..dim));
        let mut plus = params.clone();
        plus.weights[r][c] += h;
        let mut minus = params.clone();
        minus.weights[r][c] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let an = analytic.get(r, c);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{grad_log_prob, FEATURE_DIM};
    use crate::scenes::{generate_for, SceneConfig};
    use proptest::prelude::*;

    fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
        PolicyParams {
            weights: (0..CATALOG_SIZE)
                .map(|_| std::array::from_fn(|_| rng.random_range(-scale..scale)))
                .collect(),
        }
    }

    fn random_features(rng: &mut ChaCha8Rng) -> FeatureVector {
        std::array::from_fn(|_| rng.random_range(-1.0..1.0))
    }

    fn dummy_breakdown(total: f64) -> RewardBreakdown {
        RewardBreakdown {
            r_acc: 0.0,
            r_tool: 0.0,
            r_cof: 0.0,
            r_proc: 0.0,
            r_fmt: 0.0,
            i_fmt: 1,
            n_step: 0,
            p_alpha: 0.0,
            total,
        }
    }

    /// Synthetic groups whose old log-probs come from `old`.
    fn synthetic_groups(rng: &mut ChaCha8Rng, old: &PolicyParams, n_groups: usize, g: usize) -> Vec<Group> {
        (0..n_groups)
            .map(|gi| {
                let records: Vec<TrajectoryRecord> = (0..g)
                    .map(|_| {
                        let len = rng.random_range(1..5);
                        let decisions = (0..len)
                            .map(|_| {
                                let x = random_features(rng);
                                let p = action_distribution(old, &x).unwrap();
                                let a = sample_index(&p, rng);
                                Decision {
                                    features: x,
                                    action: a,
                                    log_prob_old: p[a].ln(),
                                }
                            })
                            .collect();
                        TrajectoryRecord {
                            question_id: format!("q{gi}"),
                            category: Category::Tiny,
                            transcript: Transcript::new("q", "?", 10, 10),
                            decisions,
                            breakdown: dummy_breakdown(rng.random_range(-1.0..2.0)),
                            correct: false,
                            transitions: vec![],
                        }
                    })
                    .collect();
                let rewards: Vec<f64> = records.iter().map(|r| r.reward()).collect();
                Group {
                    question_id: format!("q{gi}"),
                    advantages: standardize_advantages(&rewards, 1e-6),
                    records,
                }
            })
            .collect()
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(standardize_advantages(&[1.0, 1.0, 1.0, 1.0], 1e-4), vec![0.0; 4]);
        let a = standardize_advantages(&[0.0, 2.0], 1e-6);
        assert_eq!(a, vec![-1.0 / (1.0 + 1e-6), 1.0 / (1.0 + 1e-6)]);
        assert_eq!(standardize_advantages(&[5.0], 0.3), vec![0.0]);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert_eq!(clipped_surrogate(1.0, -0.3, 0.2), -0.3);
        assert_eq!(clipped_surrogate(2.0, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(2.0, -1.0, 0.2), -2.0);
    }

    #[test]
    fn kl_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 1.0);
        let states: Vec<FeatureVector> = (0..10).map(|_| random_features(&mut rng)).collect();
        assert_eq!(kl_to_reference(&p, &p, &states).unwrap(), 0.0);
        let q = random_params(&mut rng, 1.0);
        assert!(kl_to_reference(&p, &q, &states).unwrap() > 0.0);
        assert!(kl_to_reference(&p, &q, &[]).is_err());

        let uniform: [f64; CATALOG_SIZE] = [1.0 / 23.0; CATALOG_SIZE];
        let mut peaked: [f64; CATALOG_SIZE] = [0.01 / 22.0; CATALOG_SIZE];
        peaked[0] = 0.99;
        let oracle: f64 = uniform.iter().zip(&peaked).map(|(u, v)| u * (u / v).ln()).sum();
        assert!((kl_categorical(&uniform, &peaked) - oracle).abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let old = random_params(&mut rng, 0.5);
            let noise = random_params(&mut rng, 0.1);
            let mut params = old.clone();
            params.add_scaled(&Gradient(noise.weights), 1.0);
            let reference = random_params(&mut rng, 0.5);
            let groups = synthetic_groups(&mut rng, &old, 2, 4);
            let obj = Objective {
                groups: &groups,
                reference: &reference,
                epsilon: 0.2,
                beta: rng.random_range(0.0..0.5),
            };
            let (_, g) = obj.evaluate(&params).unwrap();
            let loss = |p: &PolicyParams| obj.value(p).unwrap();
            let err = finite_difference_check(&loss, &g, &params, 1e-5, 30, &mut rng).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn finite_difference_check_on_quadratic_and_bad_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(&mut rng, 1.0);
        let loss = |p: &PolicyParams| p.weights.iter().flatten().map(|v| 1.5 * v * v).sum::<f64>();
        let mut g = Gradient::zeros();
        for (r, row) in params.weights.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                g.0[r][c] = 3.0 * v;
            }
        }
        let err = finite_difference_check(&loss, &g, &params, 1e-4, 50, &mut rng).unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(finite_difference_check(&loss, &g, &params, 0.0, 5, &mut rng).is_err());
    }

    #[test]
    fn on_policy_gradient_is_vanilla_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = random_params(&mut rng, 0.7);
        let groups = synthetic_groups(&mut rng, &params, 3, 4);
        let obj = Objective {
            groups: &groups,
            reference: &params,
            epsilon: 0.2,
            beta: 0.0,
        };
        let (v, g) = obj.evaluate(&params).unwrap();
        assert_eq!(v.clip_fraction, 0.0);
        let mut expect = Gradient::zeros();
        for grp in &groups {
            for (rec, adv) in grp.records.iter().zip(&grp.advantages) {
                let w = adv / (groups.len() as f64 * grp.records.len() as f64 * rec.decisions.len() as f64);
                for d in &rec.decisions {
                    expect.add(&grad_log_prob(&params, &d.features, d.action).unwrap(), w);
                }
            }
        }
        for r in 0..CATALOG_SIZE {
            for c in 0..FEATURE_DIM {
                assert!((g.get(r, c) - expect.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_variance_groups_leave_only_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_params(&mut rng, 0.7);
        let mut groups = synthetic_groups(&mut rng, &params, 2, 3);
        for g in &mut groups {
            for r in &mut g.records {
                r.breakdown.total = 0.4;
            }
            let rewards: Vec<f64> = g.records.iter().map(|r| r.reward()).collect();
            g.advantages = standardize_advantages(&rewards, 1e-6);
        }
        let cfg = TrainConfig::default();
        let (next, _) = grpo_update(&params, &groups, &cfg, &params).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn good_trajectory_gains_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = random_params(&mut rng, 0.3);
        let mut groups = synthetic_groups(&mut rng, &params, 1, 2);
        groups[0].records[0].breakdown.total = 1.0;
        groups[0].records[1].breakdown.total = 0.0;
        groups[0].advantages = standardize_advantages(&[1.0, 0.0], 1e-6);
        let cfg = TrainConfig {
            beta: 0.0,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let first = &groups[0].records[0].decisions[0];
        let before = action_distribution(&params, &first.features).unwrap()[first.action];
        let (next, _) = grpo_update(&params, &groups, &cfg, &params).unwrap();
        let after = action_distribution(&next, &first.features).unwrap()[first.action];
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn kl_anchor_contracts_without_advantages() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reference = random_params(&mut rng, 0.5);
        let mut params = random_params(&mut rng, 0.5);
        let mut groups = synthetic_groups(&mut rng, &reference, 2, 3);
        for g in &mut groups {
            g.advantages.iter_mut().for_each(|a| *a = 0.0);
        }
        let states: Vec<FeatureVector> = groups
            .iter()
            .flat_map(|g| &g.records)
            .flat_map(|r| &r.decisions)
            .map(|d| d.features)
            .collect();
        let cfg = TrainConfig {
            beta: 1.0,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let mut last = kl_to_reference(&params, &reference, &states).unwrap();
        let initial = last;
        for _ in 0..100 {
            params = grpo_update(&params, &groups, &cfg, &reference).unwrap().0;
            let kl = kl_to_reference(&params, &reference, &states).unwrap();
            assert!(kl <= last + 1e-15, "{kl} > {last}");
            last = kl;
        }
        assert!(last < initial);
    }

    fn tiny_record(seed: u64, category: Category) -> SceneRecord {
        let (scene, question) = generate_for(seed, &SceneConfig::default(), category).unwrap();
        SceneRecord { scene, question }
    }

    #[test]
    fn rollout_group_is_deterministic_and_sized() {
        let rec = tiny_record(1, Category::Tiny);
        let env = EnvConfig::default();
        let params = PolicyParams::zeros();
        let a = rollout_group(&params, 99, &rec, 4, &env, StdKind::Population, 1e-6).unwrap();
        let b = rollout_group(&params, 99, &rec, 4, &env, StdKind::Population, 1e-6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 4);
        assert!(a.records.iter().all(|r| r.question_id == rec.question.question_id));
        for r in &a.records {
            let assistant = r.transcript.turns.iter().filter(|t| t.role == crate::protocol::Role::Assistant).count();
            assert_eq!(assistant, r.decisions.len());
        }
    }

    #[test]
    fn always_answer_policy_never_calls_tools() {
        let mut params = PolicyParams::zeros();
        params.weights[0][FEATURE_DIM - 1] = 50.0;
        let rec = tiny_record(2, Category::Tiny);
        let g = rollout_group(&params, 3, &rec, 6, &EnvConfig::default(), StdKind::Population, 1e-6).unwrap();
        assert!(g.records.iter().all(|r| r.breakdown.n_step == 0));
    }

    #[test]
    fn training_is_reproducible() {
        let corpus: Vec<SceneRecord> = (0..6)
            .map(|s| tiny_record(s, if s % 2 == 0 { Category::Global } else { Category::Tiny }))
            .collect();
        let cfg = TrainConfig {
            updates: 3,
            groups_per_update: 3,
            group_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let out = train(&PolicyParams::zeros(), &PolicyParams::zeros(), &corpus, &cfg, &EnvConfig::default(), |_, _| {}).unwrap();
            (out.params, out.updates)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { group_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn advantage_laws(rewards in prop::collection::vec(-5.0f64..5.0, 1..16), shift in -10.0f64..10.0) {
            let a = standardize_advantages(&rewards, 1e-6);
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            for (x, y) in a.iter().zip(standardize_advantages(&shifted, 1e-6)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let n = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std > 1e-5 {
                let a_std = (a.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
                prop_assert!((a_std - std / (std + 1e-6)).abs() < 1e-3);
            }
        }

        #[test]
        fn surrogate_matches_definition(ratio in 0.01f64..5.0, adv in -3.0f64..3.0, eps in 0.01f64..0.9) {
            let clipped = ratio.max(1.0 - eps).min(1.0 + eps);
            prop_assert_eq!(clipped_surrogate(ratio, adv, eps), (ratio * adv).min(clipped * adv));
        }
    }
}
