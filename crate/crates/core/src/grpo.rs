//! Group-relative policy optimization on a toy grounding policy.
//!
//! For each query the old policy samples a group of `G` outputs, each output
//! is scored with the grounding reward, and rewards are standardized within
//! the group into advantages. The policy ascends
//!
//! ```text
//! J(θ) = mean over groups of (1/G) Σ_i [ r_i(θ) A_i − β D_i(θ) ]
//! r_i(θ) = π_θ(o_i) / π_θold(o_i)
//! D_i(θ) = x − ln x − 1,   x = π_ref(o_i) / π_θ(o_i)
//! ```
//!
//! with an optional clipped surrogate `min(r A, clip(r, 1−ε, 1+ε) A)`.
//! Ratios and the KL estimate are per output (sequence level).
//!
//! The policy is a softmax over candidate boxes for each scene feature, so
//! `∂ ln π_θ(a | f) / ∂ θ[f, b] = 1[a = b] − π_θ(b | f)` and the gradient of
//! `J` is exact.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_literal, BBox};
use crate::reward::{self, RewardConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub epsilon_std: f64,
    pub clip_epsilon: Option<f64>,
    /// Gradient steps taken on each batch of rollouts.
    pub inner_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 4,
            beta: 0.04,
            learning_rate: 4.0,
            iterations: 200,
            epsilon_std: 1e-8,
            clip_epsilon: None,
            inner_steps: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.epsilon_std.is_nan() || self.epsilon_std <= 0.0 {
            return bad(format!("epsilon_std must be > 0, got {}", self.epsilon_std));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                return bad(format!("clip_epsilon must be in (0, 1), got {eps}"));
            }
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be positive".to_string());
        }
        Ok(())
    }
}

/// Standardizes rewards within one group using the population standard
/// deviation. A group whose spread is below `epsilon_std` gets all-zero
/// advantages.
pub fn compute_advantages(rewards: &[f64], epsilon_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < epsilon_std {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `x − ln x − 1` with `x = π_ref / π_θ`, from log-probabilities.
pub fn kl_estimate(logp_ref: f64, logp_theta: f64) -> Result<f64> {
    if !logp_ref.is_finite() || !logp_theta.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-probs ref={logp_ref} theta={logp_theta}"
        )));
    }
    let d = logp_ref - logp_theta;
    // exp_m1 keeps precision when the ratio is close to one
    Ok((d.exp_m1() - d).max(0.0))
}

/// d/d(ln π_θ) of the KL estimate, i.e. `1 − x`.
fn kl_slope(logp_ref: f64, logp_theta: f64) -> f64 {
    -(logp_ref - logp_theta).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRole {
    Current,
    Old,
    Reference,
}

/// Softmax logit table: one row per scene feature, one column per candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub features: usize,
    pub candidates: usize,
    pub logits: Vec<f64>,
    pub role: PolicyRole,
}

impl PolicySnapshot {
    pub fn uniform(features: usize, candidates: usize) -> Self {
        PolicySnapshot {
            features,
            candidates,
            logits: vec![0.0; features * candidates],
            role: PolicyRole::Current,
        }
    }

    pub fn with_role(&self, role: PolicyRole) -> Self {
        PolicySnapshot {
            role,
            ..self.clone()
        }
    }

    fn row(&self, feature: usize) -> &[f64] {
        &self.logits[feature * self.candidates..(feature + 1) * self.candidates]
    }

    fn log_normalizer(&self, feature: usize) -> f64 {
        let row = self.row(feature);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    pub fn probs(&self, feature: usize) -> Vec<f64> {
        let z = self.log_normalizer(feature);
        self.row(feature).iter().map(|l| (l - z).exp()).collect()
    }

    pub fn log_prob(&self, feature: usize, action: usize) -> f64 {
        self.row(feature)[action] - self.log_normalizer(feature)
    }

    pub fn sample(&self, feature: usize, rng: &mut seed::Rng) -> usize {
        WeightedIndex::new(self.probs(feature))
            .expect("softmax weights are positive")
            .sample(rng)
    }

    /// Most likely candidate; ties go to the lowest index.
    pub fn greedy(&self, feature: usize) -> usize {
        let row = self.row(feature);
        let mut best = 0;
        for (i, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|l| l.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub action: usize,
    pub response: String,
    /// ln π_θ(o)
    pub logp: f64,
    /// ln π_θold(o)
    pub logp_old: f64,
    /// ln π_ref(o)
    pub logp_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub feature: usize,
    pub outputs: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    fn check(&self) -> Result<()> {
        let g = self.outputs.len();
        if g < 2 || self.rewards.len() != g || self.advantages.len() != g {
            return Err(Error::InvalidArgument(format!(
                "group `{}` has {} outputs, {} rewards, {} advantages",
                self.query_id,
                g,
                self.rewards.len(),
                self.advantages.len()
            )));
        }
        for o in &self.outputs {
            if !(o.logp.is_finite() && o.logp_old.is_finite() && o.logp_ref.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "group `{}` output {} is missing a log-prob",
                    self.query_id, o.action
                )));
            }
        }
        Ok(())
    }
}

fn surrogate(ratio: f64, advantage: f64, clip: Option<f64>) -> f64 {
    let plain = ratio * advantage;
    match clip {
        Some(eps) => plain.min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage),
        None => plain,
    }
}

/// d/d(ln π_θ) of the surrogate term. Where the clipped branch is strictly
/// smaller the term is constant in θ.
fn surrogate_slope(ratio: f64, advantage: f64, clip: Option<f64>) -> f64 {
    let plain = ratio * advantage;
    match clip {
        Some(eps) if ratio.clamp(1.0 - eps, 1.0 + eps) * advantage < plain => 0.0,
        _ => plain,
    }
}

fn objective_with(groups: &[RolloutGroup], cfg: &GrpoConfig, logp: impl Fn(&RolloutGroup, &Rollout) -> f64) -> Result<f64> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for g in groups {
        g.check()?;
        let mut sum = 0.0;
        for (o, &a) in g.outputs.iter().zip(&g.advantages) {
            let lp = logp(g, o);
            let ratio = (lp - o.logp_old).exp();
            sum += surrogate(ratio, a, cfg.clip_epsilon) - cfg.beta * kl_estimate(o.logp_ref, lp)?;
        }
        total += sum / g.outputs.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// The objective from the log-probs stored on each output.
pub fn objective(groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<f64> {
    objective_with(groups, cfg, |_, o| o.logp)
}

/// The objective with `ln π_θ` recomputed from `policy`.
pub fn objective_at(groups: &[RolloutGroup], policy: &PolicySnapshot, cfg: &GrpoConfig) -> Result<f64> {
    objective_with(groups, cfg, |g, o| policy.log_prob(g.feature, o.action))
}

/// Exact gradient of [`objective_at`] with respect to the logits of
/// `policy`; the old and reference log-probs are held fixed.
pub fn objective_gradient(groups: &[RolloutGroup], policy: &PolicySnapshot, cfg: &GrpoConfig) -> Result<Vec<f64>> {
    if policy.role != PolicyRole::Current {
        return Err(Error::InvalidArgument(format!(
            "gradient needs the current policy, got {:?}",
            policy.role
        )));
    }
    let mut grad = vec![0.0; policy.logits.len()];
    if groups.is_empty() {
        return Ok(grad);
    }
    let n_groups = groups.len() as f64;
    for g in groups {
        g.check()?;
        if g.feature >= policy.features {
            return Err(Error::InvalidArgument(format!(
                "group `{}` feature {} outside policy table",
                g.query_id, g.feature
            )));
        }
        let probs = policy.probs(g.feature);
        let row = &mut grad[g.feature * policy.candidates..(g.feature + 1) * policy.candidates];
        let scale = 1.0 / (g.outputs.len() as f64 * n_groups);
        for (o, &a) in g.outputs.iter().zip(&g.advantages) {
            let lp = policy.log_prob(g.feature, o.action);
            let ratio = (lp - o.logp_old).exp();
            let coef = surrogate_slope(ratio, a, cfg.clip_epsilon) - cfg.beta * kl_slope(o.logp_ref, lp);
            for (b, (dst, p)) in row.iter_mut().zip(&probs).enumerate() {
                let indicator = if b == o.action { 1.0 } else { 0.0 };
                *dst += scale * coef * (indicator - p);
            }
        }
    }
    Ok(grad)
}

/// One grounding query of the toy environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub feature: usize,
    pub gt: BBox,
    pub candidates: Vec<BBox>,
    pub candidate_iou: Vec<f64>,
    pub correct: usize,
}

/// Desk-scale stand-in for a grounding model: each query offers a fixed set
/// of candidate boxes and the policy picks one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGroundingEnv {
    pub scenes: Vec<ToyScene>,
}

impl ToyGroundingEnv {
    pub fn new(scenes: Vec<ToyScene>, tau: f64) -> Result<Self> {
        let Some(first) = scenes.first() else {
            return Err(Error::InvalidArgument("environment has no scenes".to_string()));
        };
        let k = first.candidates.len();
        for (i, s) in scenes.iter().enumerate() {
            if s.candidates.len() < 2 || s.candidates.len() != k || s.candidate_iou.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "scene {i} needs {k} >= 2 candidates with IoUs"
                )));
            }
            if s.correct >= k {
                return Err(Error::InvalidArgument(format!("scene {i} correct index out of range")));
            }
            let above = s.candidate_iou.iter().any(|&v| v >= tau);
            let below = s.candidate_iou.iter().any(|&v| v < tau);
            if !(above && below) {
                return Err(Error::InvalidArgument(format!(
                    "scene {i} candidate IoUs do not straddle tau={tau}"
                )));
            }
        }
        Ok(ToyGroundingEnv { scenes })
    }

    /// `n_scenes` scenes with distinct features; one candidate per scene has
    /// IoU at least `0.9` with the ground truth and the rest at most `0.2`.
    pub fn generate(n_scenes: usize, n_candidates: usize, rng_seed: u64) -> Result<Self> {
        if n_candidates < 2 {
            return Err(Error::InvalidArgument("need at least 2 candidates".to_string()));
        }
        let mut rng = seed::rng(rng_seed, &[4]);
        let mut scenes = Vec::with_capacity(n_scenes);
        for feature in 0..n_scenes {
            let gt = random_box(&mut rng, 100, 400)?;
            let good = loop {
                let [x1, y1, x2, y2] = gt.coords();
                let j = |rng: &mut seed::Rng, c: i64| c + rng.gen_range(-8..=8);
                let c = [j(&mut rng, x1), j(&mut rng, y1), j(&mut rng, x2), j(&mut rng, y2)];
                if let Ok(b) = BBox::clipped(c, gt.space()) {
                    if gt.iou(&b)? >= 0.9 {
                        break b;
                    }
                }
            };
            let correct = rng.gen_range(0..n_candidates);
            let mut candidates = Vec::with_capacity(n_candidates);
            for i in 0..n_candidates {
                if i == correct {
                    candidates.push(good);
                    continue;
                }
                loop {
                    let b = random_box(&mut rng, 80, 400)?;
                    if gt.iou(&b)? <= 0.2 {
                        candidates.push(b);
                        break;
                    }
                }
            }
            let candidate_iou = candidates.iter().map(|c| gt.iou(c)).collect::<Result<_>>()?;
            scenes.push(ToyScene {
                feature,
                gt,
                candidates,
                candidate_iou,
                correct,
            });
        }
        Self::new(scenes, 0.5)
    }

    pub fn features(&self) -> usize {
        self.scenes.iter().map(|s| s.feature + 1).max().unwrap_or(0)
    }

    pub fn candidates(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.candidates.len())
    }

    /// Fraction of scenes whose greedy choice has IoU at least `threshold`.
    pub fn greedy_accuracy(&self, policy: &PolicySnapshot, threshold: f64) -> f64 {
        let hits = self
            .scenes
            .iter()
            .filter(|s| s.candidate_iou[policy.greedy(s.feature)] >= threshold)
            .count();
        hits as f64 / self.scenes.len() as f64
    }
}

fn random_box(rng: &mut seed::Rng, min_side: i64, max_side: i64) -> Result<BBox> {
    let w = rng.gen_range(min_side..=max_side);
    let h = rng.gen_range(min_side..=max_side);
    let x = rng.gen_range(0..=1000 - w);
    let y = rng.gen_range(0..=1000 - h);
    BBox::normalized([x, y, x + w, y + h])
}

/// Templated reasoning-plus-answer text for choosing `candidate`. Longer
/// rationales go with higher candidate indices so the length metric moves
/// as the policy sharpens.
pub fn render_response(scene: &ToyScene, candidate: usize) -> String {
    let mut think = format!("Comparing the {} candidate regions.", scene.candidates.len());
    for i in 0..=candidate {
        think.push_str(&format!(" Region {i} was examined for distinguishing features."));
    }
    format!(
        "<think>{think}</think><answer>{}</answer>",
        box_literal(scene.candidates[candidate].coords())
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub mean_response_length: f64,
    pub objective_value: f64,
    /// Greedy-choice accuracy at IoU >= 0.5 after this row's update.
    pub greedy_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub policy: PolicySnapshot,
}

/// Samples one group per scene from `old` and scores it.
pub fn collect_rollouts(
    env: &ToyGroundingEnv,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    grpo: &GrpoConfig,
    rewards: &RewardConfig,
    rng_seed: u64,
    iteration: usize,
) -> Result<Vec<RolloutGroup>> {
    env.scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = seed::rng(rng_seed, &[5, iteration as u64, i as u64]);
            let mut outputs = Vec::with_capacity(grpo.group_size);
            let mut scores = Vec::with_capacity(grpo.group_size);
            for _ in 0..grpo.group_size {
                let action = old.sample(scene.feature, &mut rng);
                let response = render_response(scene, action);
                scores.push(reward::total_reward(&response, &scene.gt, rewards)?.total);
                let lp = old.log_prob(scene.feature, action);
                outputs.push(Rollout {
                    action,
                    response,
                    logp: lp,
                    logp_old: lp,
                    logp_ref: reference.log_prob(scene.feature, action),
                });
            }
            let advantages = compute_advantages(&scores, grpo.epsilon_std)?;
            Ok(RolloutGroup {
                query_id: format!("scene-{i}"),
                feature: scene.feature,
                outputs,
                rewards: scores,
                advantages,
            })
        })
        .collect()
}

fn summarize(groups: &[RolloutGroup]) -> Result<(f64, f64, f64)> {
    let (mut reward, mut kl, mut len, mut n) = (0.0, 0.0, 0.0, 0usize);
    for g in groups {
        for (o, r) in g.outputs.iter().zip(&g.rewards) {
            reward += r;
            kl += kl_estimate(o.logp_ref, o.logp)?;
            len += reward::count_tokens(&o.response) as f64;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok((reward / n, kl / n, len / n))
}

/// Runs the full loop from a uniform policy, which is also the frozen
/// reference. Row 0 describes the initial policy; every later row covers one
/// iteration of sampling from the refreshed old policy followed by
/// `inner_steps` ascent steps.
pub fn train(env: &ToyGroundingEnv, cfg: &GrpoConfig, rewards: &RewardConfig, rng_seed: u64) -> Result<TrainingLog> {
    cfg.validate()?;
    rewards.validate()?;
    let mut policy = PolicySnapshot::uniform(env.features(), env.candidates());
    let reference = policy.with_role(PolicyRole::Reference);
    let mut rows = Vec::with_capacity(cfg.iterations + 1);

    let init = collect_rollouts(env, &policy, &reference, cfg, rewards, rng_seed, 0)?;
    let (r, kl, len) = summarize(&init)?;
    rows.push(LogRow {
        iteration: 0,
        mean_reward: r,
        mean_kl: kl,
        mean_response_length: len,
        objective_value: objective(&init, cfg)?,
        greedy_accuracy: env.greedy_accuracy(&policy, 0.5),
    });

    for it in 1..=cfg.iterations {
        let old = policy.with_role(PolicyRole::Old);
        let groups = collect_rollouts(env, &old, &reference, cfg, rewards, rng_seed, it)?;
        let objective_value = objective(&groups, cfg)?;
        for _ in 0..cfg.inner_steps {
            let grad = objective_gradient(&groups, &policy, cfg)?;
            for (l, g) in policy.logits.iter_mut().zip(&grad) {
                *l += cfg.learning_rate * g;
            }
            if !policy.is_finite() {
                return Err(Error::NonFinite(format!(
                    "policy diverged at iteration {it} (objective {objective_value}, \
                     max |grad| {})",
                    grad.iter().fold(0.0f64, |m, g| m.max(g.abs()))
                )));
            }
        }
        let (r, kl, len) = summarize(&groups)?;
        rows.push(LogRow {
            iteration: it,
            mean_reward: r,
            mean_kl: kl,
            mean_response_length: len,
            objective_value,
            greedy_accuracy: env.greedy_accuracy(&policy, 0.5),
        });
    }
    Ok(TrainingLog { rows, policy })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-8).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(compute_advantages(&[0.7; 4], 1e-8).unwrap(), vec![0.0; 4]);
        assert_eq!(compute_advantages(&[2.0, 1.0, 1.0, 2.0], 1e-8).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert!(compute_advantages(&[1.0], 1e-8).is_err());
        assert!(compute_advantages(&[1.0, f64::NAN], 1e-8).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(-1.3, -1.3).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((kl_estimate(ln2, 0.0).unwrap() - 0.306853).abs() < 1e-6);
        assert!((kl_estimate(-ln2, 0.0).unwrap() - 0.193147).abs() < 1e-6);
        assert!(kl_estimate(f64::NEG_INFINITY, 0.0).is_err());
    }

    fn group(ratios: &[f64], advantages: &[f64]) -> RolloutGroup {
        RolloutGroup {
            query_id: "q".into(),
            feature: 0,
            outputs: ratios
                .iter()
                .enumerate()
                .map(|(i, r)| Rollout {
                    action: i,
                    response: String::new(),
                    logp: r.ln() - 1.0,
                    logp_old: -1.0,
                    logp_ref: -1.0,
                })
                .collect(),
            rewards: advantages.to_vec(),
            advantages: advantages.to_vec(),
        }
    }

    #[test]
    fn objective_examples() {
        let cfg = GrpoConfig {
            beta: 0.0,
            ..GrpoConfig::default()
        };
        assert_eq!(objective(&[group(&[1.0, 1.0], &[1.0, -1.0])], &cfg).unwrap(), 0.0);
        let v = objective(&[group(&[1.2, 0.8], &[1.0, -1.0])], &cfg).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn clipped_objective_caps_ratio() {
        let cfg = GrpoConfig {
            beta: 0.0,
            clip_epsilon: Some(0.1),
            ..GrpoConfig::default()
        };
        // 1.5 clips to 1.1 for the positive advantage; 0.5 is already the min
        let v = objective(&[group(&[1.5, 0.5], &[1.0, -1.0])], &cfg).unwrap();
        assert!((v - (1.1 - 0.9) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_missing_logprobs() {
        let mut g = group(&[1.0, 1.0], &[1.0, -1.0]);
        g.outputs[0].logp_old = f64::NAN;
        assert!(objective(&[g], &GrpoConfig::default()).is_err());
        let mut g = group(&[1.0, 1.0], &[1.0, -1.0]);
        g.advantages.pop();
        assert!(objective(&[g], &GrpoConfig::default()).is_err());
    }

    #[test]
    fn zero_advantages_and_no_kl_give_zero_gradient() {
        let mut policy = PolicySnapshot::uniform(1, 3);
        policy.logits = vec![0.3, -0.2, 0.9];
        let mut g = group(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]);
        for o in &mut g.outputs {
            o.logp = policy.log_prob(0, o.action);
        }
        let cfg = GrpoConfig {
            beta: 0.0,
            ..GrpoConfig::default()
        };
        assert!(objective_gradient(&[g], &policy, &cfg).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_requires_current_policy() {
        let p = PolicySnapshot::uniform(1, 2).with_role(PolicyRole::Old);
        assert!(objective_gradient(&[], &p, &GrpoConfig::default()).is_err());
    }

    #[test]
    fn policy_softmax_is_normalized() {
        let mut p = PolicySnapshot::uniform(2, 3);
        p.logits = vec![1.0, 2.0, 3.0, -500.0, 0.0, 500.0];
        for f in 0..2 {
            let s: f64 = p.probs(f).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.greedy(0), 2);
        assert_eq!(PolicySnapshot::uniform(1, 4).greedy(0), 0);
    }

    #[test]
    fn generated_env_has_one_good_candidate() {
        let env = ToyGroundingEnv::generate(16, 4, 3).unwrap();
        for s in &env.scenes {
            let good: Vec<_> = s.candidate_iou.iter().filter(|&&v| v >= 0.5).collect();
            assert_eq!(good.len(), 1);
            assert!(s.candidate_iou[s.correct] >= 0.9);
            assert!(s
                .candidate_iou
                .iter()
                .enumerate()
                .all(|(i, &v)| i == s.correct || v <= 0.2));
        }
    }

    #[test]
    fn env_rejects_one_sided_scenes() {
        let mut env = ToyGroundingEnv::generate(2, 3, 0).unwrap();
        let s = &mut env.scenes[0];
        s.candidate_iou = vec![0.1; 3];
        assert!(ToyGroundingEnv::new(env.scenes, 0.5).is_err());
    }

    #[test]
    fn zero_iterations_logs_only_init_row() {
        let env = ToyGroundingEnv::generate(4, 3, 1).unwrap();
        let cfg = GrpoConfig {
            iterations: 0,
            ..GrpoConfig::default()
        };
        let log = train(&env, &cfg, &RewardConfig::default(), 9).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.rows[0].iteration, 0);
        assert_eq!(log.policy, PolicySnapshot::uniform(4, 3));
    }

    #[test]
    fn rendered_responses_parse_and_score() {
        let env = ToyGroundingEnv::generate(1, 4, 2).unwrap();
        let s = &env.scenes[0];
        let r = reward::total_reward(&render_response(s, s.correct), &s.gt, &RewardConfig::default()).unwrap();
        assert_eq!(r.format_reward, 1.0);
        assert!(r.iou_reward >= 0.9);
        let lens: Vec<_> = (0..4).map(|c| reward::count_tokens(&render_response(s, c))).collect();
        assert!(lens.windows(2).all(|w| w[0] < w[1]));
    }
}
