//! Group-relative policy optimization.
//!
//! For each question a group of `G` trajectories is sampled from the
//! behaviour policy `π_old`. Each trajectory gets one scalar reward, which is
//! standardized within its group into an advantage shared by all of the
//! trajectory's decisions. The objective maximized is
//!
//! ```text
//! J(θ) = mean_groups 1/G Σ_i 1/|o_i| Σ_t [ min(ρ_t·Â_i, clip(ρ_t, 1-ε, 1+ε)·Â_i) - β·k_t ]
//! ρ_t  = exp(log π_θ(o_t) - log π_old(o_t))
//! k_t  = exp(log π_ref(o_t) - log π_θ(o_t)) - (log π_ref(o_t) - log π_θ(o_t)) - 1
//! ```
//!
//! Any policy whose decisions have differentiable log-probabilities can be
//! trained through [`DifferentiablePolicy`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("group statistics need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
    #[error("trajectory {index}: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        index: usize,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite gradient at parameter {param} (objective {objective})")]
    NonFiniteGradient { param: usize, objective: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub std_floor: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 10,
            clip_eps: 0.2,
            kl_coef: 0.01,
            learning_rate: 40.0,
            std_floor: 1e-8,
            iterations: 300,
            seed: 7,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::InvalidConfig(format!(
                "group_size must be at least 2, got {}",
                self.group_size
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!(
                "kl_coef must be non-negative, got {}",
                self.kl_coef
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.std_floor > 0.0 && self.std_floor.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!(
                "std_floor must be positive, got {}",
                self.std_floor
            )));
        }
        Ok(())
    }
}

/// Standardizes rewards within a group using the population standard
/// deviation, floored at `std_floor`. Equal rewards give all-zero
/// advantages.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    // The rounded mean of equal values can differ from them by an ulp.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let denom = std.max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// d/dratio of [`clipped_term`]; zero wherever the clipped branch is active.
fn clipped_term_dratio(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

/// Non-negative per-decision KL estimator `e^x - x - 1` with
/// `x = logp_ref - logp_current`.
pub fn kl_estimate(logp_current: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_current;
    // exp_m1 keeps precision when the two policies are close.
    (x.exp_m1() - x).max(0.0)
}

/// One binary decision of a factorized policy: whether the element governed
/// by parameter `param` was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub param: usize,
    pub taken: bool,
}

pub trait DifferentiablePolicy {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn decision_logprob(&self, decision: &Decision) -> f64;
    /// Adds `scale · ∇θ log π(decision)` into `grad`.
    fn accumulate_logprob_grad(&self, decision: &Decision, scale: f64, grad: &mut [f64]);

    fn trajectory_logprob(&self, decisions: &[Decision]) -> f64 {
        decisions.iter().map(|d| self.decision_logprob(d)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub decisions: Vec<Decision>,
    /// Per-decision log-probabilities under the sampling policy.
    pub logp_old: Vec<f64>,
    /// Per-decision log-probabilities under the frozen reference policy.
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
}

impl Trajectory {
    pub fn sampled<P: DifferentiablePolicy, R: DifferentiablePolicy>(
        decisions: Vec<Decision>,
        behaviour: &P,
        reference: &R,
    ) -> Self {
        let logp_old = decisions
            .iter()
            .map(|d| behaviour.decision_logprob(d))
            .collect();
        let logp_ref = decisions
            .iter()
            .map(|d| reference.decision_logprob(d))
            .collect();
        Trajectory {
            decisions,
            logp_old,
            logp_ref,
            reward: 0.0,
            advantage: 0.0,
        }
    }

    fn check(&self, index: usize) -> Result<(), GrpoError> {
        let expected = self.decisions.len();
        for (what, got) in [
            ("logp_old", self.logp_old.len()),
            ("logp_ref", self.logp_ref.len()),
        ] {
            if got != expected {
                return Err(GrpoError::LengthMismatch {
                    index,
                    what,
                    got,
                    expected,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub question_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryGroup {
    /// Recomputes every trajectory's advantage from the group's rewards.
    pub fn assign_advantages(&mut self, std_floor: f64) -> Result<(), GrpoError> {
        let rewards: Vec<f64> = self.trajectories.iter().map(|t| t.reward).collect();
        let adv = group_advantages(&rewards, std_floor)?;
        for (t, a) in self.trajectories.iter_mut().zip(adv) {
            t.advantage = a;
        }
        Ok(())
    }

    pub fn mean_reward(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.reward).sum::<f64>() / self.trajectories.len() as f64
    }
}

/// Objective value and optionally its gradient in one pass.
fn evaluate<P: DifferentiablePolicy>(
    policy: &P,
    groups: &[TrajectoryGroup],
    cfg: &GrpoConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<f64, GrpoError> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let group_weight = 1.0 / groups.len() as f64;
    let mut total = 0.0;
    for group in groups {
        if group.trajectories.is_empty() {
            continue;
        }
        let traj_weight = group_weight / group.trajectories.len() as f64;
        for (i, traj) in group.trajectories.iter().enumerate() {
            traj.check(i)?;
            if traj.decisions.is_empty() {
                continue;
            }
            let w = traj_weight / traj.decisions.len() as f64;
            for (t, d) in traj.decisions.iter().enumerate() {
                let logp = policy.decision_logprob(d);
                let ratio = (logp - traj.logp_old[t]).exp();
                let surrogate = clipped_term(ratio, traj.advantage, cfg.clip_eps);
                let kl = kl_estimate(logp, traj.logp_ref[t]);
                total += w * (surrogate - cfg.kl_coef * kl);
                if let Some(g) = grad.as_deref_mut() {
                    // dρ/dlogp = ρ ; dk/dlogp = 1 - exp(logp_ref - logp)
                    let d_surrogate =
                        clipped_term_dratio(ratio, traj.advantage, cfg.clip_eps) * ratio;
                    let d_kl = 1.0 - (traj.logp_ref[t] - logp).exp();
                    let scale = w * (d_surrogate - cfg.kl_coef * d_kl);
                    if scale != 0.0 {
                        policy.accumulate_logprob_grad(d, scale, g);
                    }
                }
            }
        }
    }
    Ok(total)
}

pub fn grpo_objective<P: DifferentiablePolicy>(
    policy: &P,
    groups: &[TrajectoryGroup],
    cfg: &GrpoConfig,
) -> Result<f64, GrpoError> {
    evaluate(policy, groups, cfg, None)
}

/// Objective and its analytic gradient with respect to the policy
/// parameters. `π_old` and `π_ref` log-probabilities are constants.
pub fn grpo_gradient<P: DifferentiablePolicy>(
    policy: &P,
    groups: &[TrajectoryGroup],
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>), GrpoError> {
    let mut grad = vec![0.0; policy.params().len()];
    let j = evaluate(policy, groups, cfg, Some(&mut grad))?;
    Ok((j, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub grad_norm: f64,
}

/// One gradient-ascent step on the objective. Parameters are left untouched
/// if the gradient is not finite.
pub fn policy_update<P: DifferentiablePolicy>(
    policy: &mut P,
    groups: &[TrajectoryGroup],
    cfg: &GrpoConfig,
) -> Result<UpdateStats, GrpoError> {
    let (objective, grad) = grpo_gradient(policy, groups, cfg)?;
    if let Some(param) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GrpoError::NonFiniteGradient { param, objective });
    }
    if !objective.is_finite() {
        return Err(GrpoError::NonFiniteGradient {
            param: 0,
            objective,
        });
    }
    for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
        *p += cfg.learning_rate * g;
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(UpdateStats {
        objective,
        grad_norm,
    })
}
