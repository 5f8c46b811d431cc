//! Exhaustive-enumeration oracle for the gradient estimator.
//!
//! On a small enough instance every trajectory (goal choice per episode,
//! action choice per free step) can be enumerated. Three exact quantities
//! are then formed by weighted sums of backward passes:
//!
//! - the gradient of the exact objective `J = sum_traj P(traj) r(traj)`,
//!   differentiated through both the probabilities and the rewards;
//! - the exact expectation of the estimator gradient,
//!   `sum_traj P(traj) * grad[log p(traj) * detach(r) + r]`;
//! - the exact expectation of the reward gradient alone,
//!   `sum_traj P(traj) * grad r(traj)`.
//!
//! Unbiasedness means the first two agree componentwise; with all policies
//! frozen uniform the second must also collapse onto the third.

use super::{Mode, NetHandles};
use crate::autograd::{Graph, Tensor, TensorId};
use crate::env::{Axis, EnvConfig, EnvState};
use crate::policies::{action_forward, goal_forward, NetworkConfig, PolicyParams};
use crate::{Error, Result};

/// Everything that pins down one oracle run. The label is a probability
/// vector (one-hot in normal use; tests may pass degenerate vectors to
/// exercise structure).
pub struct OracleInstance<'a> {
    pub image: &'a Tensor,
    pub label: &'a Tensor,
    pub start_pose: (usize, usize),
    pub params: &'a PolicyParams,
    pub env: &'a EnvConfig,
    pub net: &'a NetworkConfig,
    pub mode: Mode,
}

/// Which exact quantity a walker accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleQuantity {
    ExactObjectiveGrad,
    EstimatorExpectedGrad,
    RewardExpectedGrad,
}

/// Componentwise comparison of the exact gradients, flattened in parameter
/// order (goal, action, classifier).
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub trajectories: usize,
    /// Total probability mass of the enumerated trajectory set; must be 1.
    pub probability_total: f64,
    pub exact: Vec<f64>,
    pub estimator: Vec<f64>,
    pub reward_only: Vec<f64>,
    /// max_i |exact_i - estimator_i|
    pub max_abs_diff: f64,
    /// max_i |estimator_i - reward_only_i|
    pub estimator_vs_reward_only: f64,
}

/// Counts the trajectory tree without touching any network.
pub fn count_trajectories(
    env: &EnvConfig,
    image: &Tensor,
    start_pose: (usize, usize),
) -> Result<usize> {
    fn episodes(state: EnvState, env: &EnvConfig, total: &mut usize) -> Result<()> {
        if state.steps_taken() == env.total_steps() {
            *total += 1;
            return Ok(());
        }
        for index in 0..env.n * env.n {
            let mut child = state.clone();
            child.set_goal(index)?;
            steps(child, env.horizon, env, total)?;
        }
        Ok(())
    }
    fn steps(state: EnvState, remaining: usize, env: &EnvConfig, total: &mut usize) -> Result<()> {
        if remaining == 0 {
            return episodes(state, env, total);
        }
        let rule = state.action_rule()?;
        match rule.forced_axis() {
            Some(axis) => {
                let mut child = state.clone();
                child.step(axis)?;
                steps(child, remaining - 1, env, total)
            }
            None => {
                for axis in [Axis::Vertical, Axis::Horizontal] {
                    let mut child = state.clone();
                    child.step(axis)?;
                    steps(child, remaining - 1, env, total)?;
                }
                Ok(())
            }
        }
    }
    let mut total = 0;
    let state = EnvState::reset_at(image.clone(), *env, start_pose)?;
    episodes(state, env, &mut total)?;
    Ok(total)
}

struct Walker<'a> {
    inst: &'a OracleInstance<'a>,
    quantity: OracleQuantity,
    graph: Graph,
    nets: NetHandles,
    terms: Vec<TensorId>,
    probability_total: f64,
    trajectories: usize,
}

impl<'a> Walker<'a> {
    fn new(inst: &'a OracleInstance<'a>, quantity: OracleQuantity) -> Walker<'a> {
        let mut graph = Graph::new();
        let nets = NetHandles::insert(&mut graph, inst.params, inst.env, inst.net, inst.mode, true);
        Walker {
            inst,
            quantity,
            graph,
            nets,
            terms: Vec::new(),
            probability_total: 0.0,
            trajectories: 0,
        }
    }

    fn run(mut self) -> Result<(Vec<f64>, f64, usize)> {
        let state = EnvState::reset_at(self.inst.image.clone(), *self.inst.env, self.inst.start_pose)?;
        self.walk_episode(state, 1.0, Vec::new(), Vec::new())?;
        let total = self.graph.sum_list(&self.terms)?;
        self.graph.backward(total)?;

        let mut flat = Vec::with_capacity(self.inst.params.scalar_count());
        let mut extend = |ids: &[TensorId], count: usize, sizes: &mut dyn Iterator<Item = usize>| {
            for slot in 0..count {
                let size = sizes.next().expect("aligned sizes");
                match ids.get(slot) {
                    Some(&id) => flat.extend_from_slice(self.graph.grad(id).expect("leaf")),
                    None => flat.extend(std::iter::repeat(0.0).take(size)),
                }
            }
        };
        let params = self.inst.params;
        let mut goal_sizes = params.goal.tensors().map(|t| t.len());
        extend(&self.nets.goal_ids, params.goal.len(), &mut goal_sizes);
        let mut action_sizes = params.action.tensors().map(|t| t.len());
        extend(&self.nets.action_ids, params.action.len(), &mut action_sizes);
        let mut classifier_sizes = params.classifier.tensors().map(|t| t.len());
        extend(
            &self.nets.classifier_ids,
            params.classifier.len(),
            &mut classifier_sizes,
        );
        Ok((flat, self.probability_total, self.trajectories))
    }

    /// `const_prob` multiplies every parameter-independent branch factor
    /// (uniform goals, fair coins); parameter-dependent factors ride along
    /// as `prob_ids` so the exact objective can differentiate through them.
    fn walk_episode(
        &mut self,
        state: EnvState,
        const_prob: f64,
        prob_ids: Vec<TensorId>,
        logp_ids: Vec<TensorId>,
    ) -> Result<()> {
        if state.steps_taken() == self.inst.env.total_steps() {
            return self.finish(state, const_prob, prob_ids, logp_ids);
        }
        let map_len = self.inst.env.n * self.inst.env.n;
        if self.inst.mode.uses_goal_net() {
            let (goal_input, _) = state.planner_inputs();
            let input = self.graph.constant(goal_input);
            let probs = goal_forward(&self.nets.goal_arch, &mut self.graph, input, &self.nets.goal_ids)?;
            for index in 0..map_len {
                let mut child = state.clone();
                child.set_goal(index)?;
                let pick = self.graph.select(probs, index)?;
                let log_pick = self.graph.log(pick);
                let mut branch_probs = prob_ids.clone();
                branch_probs.push(pick);
                let mut branch_logs = logp_ids.clone();
                branch_logs.push(log_pick);
                self.walk_steps(
                    child,
                    self.inst.env.horizon,
                    const_prob,
                    branch_probs,
                    branch_logs,
                )?;
            }
        } else {
            let uniform = 1.0 / map_len as f64;
            for index in 0..map_len {
                let mut child = state.clone();
                child.set_goal(index)?;
                self.walk_steps(
                    child,
                    self.inst.env.horizon,
                    const_prob * uniform,
                    prob_ids.clone(),
                    logp_ids.clone(),
                )?;
            }
        }
        Ok(())
    }

    fn walk_steps(
        &mut self,
        state: EnvState,
        remaining: usize,
        const_prob: f64,
        prob_ids: Vec<TensorId>,
        logp_ids: Vec<TensorId>,
    ) -> Result<()> {
        if remaining == 0 {
            return self.walk_episode(state, const_prob, prob_ids, logp_ids);
        }
        let rule = state.action_rule()?;
        match rule.forced_axis() {
            Some(axis) => {
                let mut child = state.clone();
                child.step(axis)?;
                self.walk_steps(child, remaining - 1, const_prob, prob_ids, logp_ids)
            }
            None if self.inst.mode.uses_action_net() => {
                let (_, action_input) = state.planner_inputs();
                let input = self.graph.constant(action_input);
                let probs =
                    action_forward(&self.nets.action_arch, &mut self.graph, input, &self.nets.action_ids)?;
                for (index, axis) in [(0, Axis::Vertical), (1, Axis::Horizontal)] {
                    let mut child = state.clone();
                    child.step(axis)?;
                    let pick = self.graph.select(probs, index)?;
                    let log_pick = self.graph.log(pick);
                    let mut branch_probs = prob_ids.clone();
                    branch_probs.push(pick);
                    let mut branch_logs = logp_ids.clone();
                    branch_logs.push(log_pick);
                    self.walk_steps(child, remaining - 1, const_prob, branch_probs, branch_logs)?;
                }
                Ok(())
            }
            None => {
                for axis in [Axis::Vertical, Axis::Horizontal] {
                    let mut child = state.clone();
                    child.step(axis)?;
                    self.walk_steps(
                        child,
                        remaining - 1,
                        const_prob * 0.5,
                        prob_ids.clone(),
                        logp_ids.clone(),
                    )?;
                }
                Ok(())
            }
        }
    }

    fn finish(
        &mut self,
        state: EnvState,
        const_prob: f64,
        prob_ids: Vec<TensorId>,
        logp_ids: Vec<TensorId>,
    ) -> Result<()> {
        let input = self.graph.constant(state.classifier_input());
        let prediction =
            self.nets
                .classifier_arch
                .forward(&mut self.graph, input, &self.nets.classifier_ids)?;
        let label = self.graph.constant(self.inst.label.clone());
        let ce = self.graph.cross_entropy(prediction, label)?;
        let reward = self.graph.scale(ce, -1.0);

        let prob_value = const_prob
            * prob_ids
                .iter()
                .map(|id| self.graph.value(*id).item())
                .product::<f64>();
        self.probability_total += prob_value;
        self.trajectories += 1;

        let term = match self.quantity {
            OracleQuantity::ExactObjectiveGrad => {
                let mut prob_node = self.graph.constant(Tensor::scalar(1.0));
                for id in &prob_ids {
                    prob_node = self.graph.mul(prob_node, *id)?;
                }
                let weighted_prob = self.graph.scale(prob_node, const_prob);
                self.graph.mul(weighted_prob, reward)?
            }
            OracleQuantity::EstimatorExpectedGrad => {
                let log_prob = if logp_ids.is_empty() {
                    self.graph.constant(Tensor::scalar(0.0))
                } else {
                    self.graph.sum_list(&logp_ids)?
                };
                let reward_detached = self.graph.detach(reward);
                let weighted = self.graph.mul(log_prob, reward_detached)?;
                let inner = self.graph.add(weighted, reward)?;
                self.graph.scale(inner, prob_value)
            }
            OracleQuantity::RewardExpectedGrad => self.graph.scale(reward, prob_value),
        };
        self.terms.push(term);
        Ok(())
    }
}

/// Enumerates the full trajectory space (refusing above `cap`) and compares
/// the exact objective gradient with the exact expectation of the estimator
/// gradient, componentwise over all parameters.
pub fn enumerate_grad_check(inst: &OracleInstance, cap: usize) -> Result<OracleReport> {
    inst.env.validate()?;
    inst.net.validate()?;
    let count = count_trajectories(inst.env, inst.image, inst.start_pose)?;
    if count > cap {
        return Err(Error::Usage(format!(
            "trajectory space of {count} exceeds the enumeration cap of {cap}"
        )));
    }

    let (exact, prob_total, trajectories) =
        Walker::new(inst, OracleQuantity::ExactObjectiveGrad).run()?;
    let (estimator, _, _) = Walker::new(inst, OracleQuantity::EstimatorExpectedGrad).run()?;
    let (reward_only, _, _) = Walker::new(inst, OracleQuantity::RewardExpectedGrad).run()?;

    let max_abs_diff = exact
        .iter()
        .zip(&estimator)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let estimator_vs_reward_only = estimator
        .iter()
        .zip(&reward_only)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    Ok(OracleReport {
        trajectories,
        probability_total: prob_total,
        exact,
        estimator,
        reward_only,
        max_abs_diff,
        estimator_vs_reward_only,
    })
}
