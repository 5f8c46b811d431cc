//! Rollout collection, the policy-gradient objective, the staged training
//! schedule, and the exhaustive-enumeration oracle that certifies the
//! gradient estimator.
//!
//! The objective for one data point with N rollouts is
//! `mean_k [ log p(traj_k) * reward_detached_k + reward_k ]`, maximized via
//! Adam on its negation. The log-probability term covers exactly the choices
//! the active training stage draws from a network: nothing in stage one,
//! goals in stage two, goals plus distribution-decided actions in stage
//! three. Forced actions never contribute.

mod adam;
mod oracle;

pub use adam::{AdamState, Grads};
pub use oracle::{enumerate_grad_check, count_trajectories, OracleInstance, OracleQuantity, OracleReport};

use crate::autograd::{Graph, Tensor, TensorId};
use crate::data::{shuffled_indices, Dataset};
use crate::env::{Axis, EnvConfig, EnvState, Goal};
use crate::policies::{
    action_forward, goal_forward, iid_action, iid_goal, sample_action, sample_goal,
    ClassifierArch, NetworkConfig, PlannerArch, PolicyParams,
};
use crate::{derive_seed, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// The three cumulative training stages. Variant order gives the only legal
/// progression; a schedule may hold a stage but never go back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum Mode {
    /// Goals and free actions i.i.d.; only the classifier trains.
    #[serde(rename = "i")]
    ClassifierOnly,
    /// Goals from the goal planner; free actions still i.i.d.
    #[serde(rename = "ii")]
    GoalPlanning,
    /// All three heads live.
    #[serde(rename = "iii")]
    FullPlanning,
}

impl Mode {
    pub fn uses_goal_net(self) -> bool {
        self >= Mode::GoalPlanning
    }

    pub fn uses_action_net(self) -> bool {
        self >= Mode::FullPlanning
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::ClassifierOnly => "i",
            Mode::GoalPlanning => "ii",
            Mode::FullPlanning => "iii",
        }
    }
}

/// Training hyperparameters and stage schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Stage schedule as (mode, epochs) pairs; modes must be non-decreasing.
    pub schedule: Vec<(Mode, usize)>,
    /// Rollouts per data point.
    pub rollouts: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: vec![
                (Mode::ClassifierOnly, 10),
                (Mode::GoalPlanning, 10),
                (Mode::FullPlanning, 10),
            ],
            rollouts: 4,
            batch_size: 60,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 || self.batch_size == 0 {
            return Err(Error::Config("rollouts and batch_size must be >= 1".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("schedule must contain at least one stage".into()));
        }
        for pair in self.schedule.windows(2) {
            if pair[1].0 < pair[0].0 {
                return Err(Error::Config(format!(
                    "schedule regresses from mode {} to mode {}; stages only move forward",
                    pair[0].0.label(),
                    pair[1].0.label()
                )));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// One entry per epoch, in order.
    pub fn epoch_modes(&self) -> Vec<Mode> {
        self.schedule
            .iter()
            .flat_map(|(mode, epochs)| std::iter::repeat(*mode).take(*epochs))
            .collect()
    }
}

/// Record of one environment step inside a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    /// Pose before the move.
    pub pose: (usize, usize),
    pub goal: Goal,
    pub axis: Axis,
    /// Protocol said the move was dictated.
    pub forced: bool,
    /// The chi flag: the move was drawn from the action distribution.
    pub sampled: bool,
    pub log_prob: Option<TensorId>,
}

/// One rollout: sampled goals and actions with their log-probability nodes,
/// plus the terminal differentiable reward.
pub struct Trajectory {
    pub goals: Vec<Goal>,
    pub goal_log_probs: Vec<TensorId>,
    pub steps: Vec<StepRecord>,
    /// `-CrossEntropy(prediction, one-hot label)` as a graph node.
    pub reward: TensorId,
    pub reward_value: f64,
    /// Prediction probabilities at the end of the rollout.
    pub prediction: Vec<f64>,
}

/// Parameter node handles for whichever heads a stage evaluates.
pub struct NetHandles {
    pub goal_arch: PlannerArch,
    pub action_arch: PlannerArch,
    pub classifier_arch: ClassifierArch,
    pub goal_ids: Vec<TensorId>,
    pub action_ids: Vec<TensorId>,
    pub classifier_ids: Vec<TensorId>,
}

impl NetHandles {
    /// Inserts parameters into the graph. Heads not used by `mode` are
    /// skipped entirely (their parameters receive zero gradient).
    pub fn insert(
        graph: &mut Graph,
        params: &PolicyParams,
        env: &EnvConfig,
        net: &NetworkConfig,
        mode: Mode,
        trainable: bool,
    ) -> NetHandles {
        let goal_ids = if mode.uses_goal_net() {
            params.goal.insert_into(graph, trainable)
        } else {
            Vec::new()
        };
        let action_ids = if mode.uses_action_net() {
            params.action.insert_into(graph, trainable)
        } else {
            Vec::new()
        };
        NetHandles {
            goal_arch: PlannerArch::goal(net, env),
            action_arch: PlannerArch::action(net, env),
            classifier_arch: ClassifierArch::new(net, env),
            goal_ids,
            action_ids,
            classifier_ids: params.classifier.insert_into(graph, trainable),
        }
    }
}

/// Runs one full trajectory from a fixed starting pose, sampling goals and
/// actions per `mode`, and closes it with the differentiable reward.
pub fn rollout(
    graph: &mut Graph,
    nets: &NetHandles,
    image: &Tensor,
    label: usize,
    env_cfg: &EnvConfig,
    mode: Mode,
    start_pose: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let mut state = EnvState::reset_at(image.clone(), *env_cfg, start_pose)?;
    let mut goals = Vec::with_capacity(env_cfg.episodes);
    let mut goal_log_probs = Vec::new();
    let mut steps = Vec::with_capacity(env_cfg.total_steps());

    for episode in 0..env_cfg.episodes {
        let goal_index = if mode.uses_goal_net() {
            let (goal_input, _) = state.planner_inputs();
            let input = graph.constant(goal_input);
            let probs = goal_forward(&nets.goal_arch, graph, input, &nets.goal_ids)?;
            let (index, log_prob) = sample_goal(graph, probs, rng)?;
            goal_log_probs.push(log_prob);
            index
        } else {
            iid_goal(env_cfg.n * env_cfg.n, rng)
        };
        let goal = state.set_goal(goal_index)?;
        goals.push(goal);

        for step in 0..env_cfg.horizon {
            let rule = state.action_rule()?;
            let pose = state.pose();
            let (axis, sampled, log_prob) = if mode.uses_action_net() && !rule.is_forced() {
                let (_, action_input) = state.planner_inputs();
                let input = graph.constant(action_input);
                let probs = action_forward(&nets.action_arch, graph, input, &nets.action_ids)?;
                let choice = sample_action(graph, probs, rule, rng)?;
                (choice.axis, choice.sampled, choice.log_prob)
            } else {
                (iid_action(rule, rng), false, None)
            };
            state.step(axis)?;
            steps.push(StepRecord {
                episode,
                step,
                pose,
                goal,
                axis,
                forced: rule.is_forced(),
                sampled,
                log_prob,
            });
        }
    }

    let final_image = graph.constant(state.classifier_input());
    let prediction = nets
        .classifier_arch
        .forward(graph, final_image, &nets.classifier_ids)?;
    let label_vec = graph.constant(Tensor::one_hot(nets.classifier_arch.classes, label)?);
    let ce = graph.cross_entropy(prediction, label_vec)?;
    let reward = graph.scale(ce, -1.0);

    Ok(Trajectory {
        goals,
        goal_log_probs,
        steps,
        reward,
        reward_value: graph.value(reward).item(),
        prediction: graph.value(prediction).data().to_vec(),
    })
}

/// Log-probability of the trajectory under the stage's sampling semantics:
/// a constant zero in stage one, goal terms in stage two, goal terms plus
/// chi-gated action terms in stage three.
pub fn traj_log_prob(graph: &mut Graph, traj: &Trajectory, mode: Mode) -> Result<TensorId> {
    let mut terms: Vec<TensorId> = Vec::new();
    if mode.uses_goal_net() {
        terms.extend(&traj.goal_log_probs);
    }
    if mode.uses_action_net() {
        terms.extend(traj.steps.iter().filter_map(|s| s.log_prob));
    }
    if terms.is_empty() {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    graph.sum_list(&terms)
}

/// The estimator over N rollouts of one data point:
/// `mean_k [ log p_k * detach(r_k) + r_k ]`.
pub fn j_hat(graph: &mut Graph, trajectories: &[Trajectory], mode: Mode) -> Result<TensorId> {
    if trajectories.is_empty() {
        return Err(Error::Usage("j_hat needs at least one rollout".into()));
    }
    let mut terms = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let log_prob = traj_log_prob(graph, traj, mode)?;
        let reward_detached = graph.detach(traj.reward);
        let weighted = graph.mul(log_prob, reward_detached)?;
        terms.push(graph.add(weighted, traj.reward)?);
    }
    graph.mean_list(&terms)
}

/// One stochastic prediction with frozen parameters: a single rollout whose
/// starting pose comes from `rng`, returning the class probabilities.
pub fn predict(
    params: &PolicyParams,
    image: &Tensor,
    env_cfg: &EnvConfig,
    net_cfg: &NetworkConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let max = env_cfg.pose_max();
    let pose = (rng.gen_range(0..=max), rng.gen_range(0..=max));
    let mut graph = Graph::new();
    let nets = NetHandles::insert(&mut graph, params, env_cfg, net_cfg, mode, false);
    let traj = rollout(&mut graph, &nets, image, 0, env_cfg, mode, pose, rng)?;
    Ok(traj.prediction)
}

/// Per-epoch training metrics.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    /// Batch-averaged `-j_hat`.
    pub train_loss: f64,
    /// Fraction of training rollouts whose argmax prediction was correct.
    pub train_acc: f64,
    /// Single stochastic pass over the test set.
    pub test_acc: f64,
    pub wall_seconds: f64,
}

struct SampleOutcome {
    grads: Grads,
    loss: f64,
    correct: usize,
    rollouts: usize,
}

fn process_sample(
    dataset: &Dataset,
    sample: usize,
    params: &PolicyParams,
    env_cfg: &EnvConfig,
    net_cfg: &NetworkConfig,
    mode: Mode,
    rollouts: usize,
    stream_seed: u64,
) -> Result<SampleOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(stream_seed);
    let max = env_cfg.pose_max();
    // Rollouts of one data point share their initial setting.
    let pose = (rng.gen_range(0..=max), rng.gen_range(0..=max));

    let mut graph = Graph::new();
    let nets = NetHandles::insert(&mut graph, params, env_cfg, net_cfg, mode, true);
    let image = dataset.image(sample);
    let label = dataset.label(sample);

    let mut trajectories = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        trajectories.push(rollout(
            &mut graph, &nets, image, label, env_cfg, mode, pose, &mut rng,
        )?);
    }
    let objective = j_hat(&mut graph, &trajectories, mode)?;
    let loss = graph.scale(objective, -1.0);
    let loss_value = graph.value(loss).item();
    graph.backward(loss)?;

    let mut grads = Grads::zeros_like(params);
    let mut cursor = 0;
    let mut collect = |ids: &[TensorId], expected: usize, grads: &mut Grads, graph: &Graph| {
        for slot in 0..expected {
            if let Some(&id) = ids.get(slot) {
                let buf = graph.grad(id).expect("trainable leaf");
                grads.per_tensor[cursor].copy_from_slice(buf);
            }
            cursor += 1;
        }
    };
    collect(&nets.goal_ids, params.goal.len(), &mut grads, &graph);
    collect(&nets.action_ids, params.action.len(), &mut grads, &graph);
    collect(
        &nets.classifier_ids,
        params.classifier.len(),
        &mut grads,
        &graph,
    );

    let correct = trajectories
        .iter()
        .filter(|t| argmax(&t.prediction) == label)
        .count();
    Ok(SampleOutcome {
        grads,
        loss: loss_value,
        correct,
        rollouts,
    })
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Single stochastic accuracy pass over a dataset (one rollout per sample).
pub fn stochastic_accuracy(
    params: &PolicyParams,
    dataset: &Dataset,
    env_cfg: &EnvConfig,
    net_cfg: &NetworkConfig,
    mode: Mode,
    seed: u64,
) -> Result<f64> {
    let hits: Result<Vec<bool>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &[0xacc, i as u64]));
            let probs = predict(params, dataset.image(i), env_cfg, net_cfg, mode, &mut rng)?;
            Ok(argmax(&probs) == dataset.label(i))
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len().max(1) as f64)
}

/// Runs the staged schedule. `start_epoch` counts globally finished epochs
/// (used when resuming); the callback fires after every epoch with fresh
/// metrics and the current parameters and optimizer state, and may end the
/// run early by returning `Ok(false)`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    params: &mut PolicyParams,
    optimizer: &mut AdamState,
    env_cfg: &EnvConfig,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochMetrics, &PolicyParams, &AdamState) -> Result<bool>,
) -> Result<Vec<EpochMetrics>> {
    env_cfg.validate()?;
    net_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }

    let epoch_modes = train_cfg.epoch_modes();
    let mut metrics = Vec::new();

    for epoch in start_epoch..epoch_modes.len() {
        let started = Instant::now();
        let mode = epoch_modes[epoch];
        if epoch > 0 && epoch_modes[epoch - 1] != mode {
            // Fresh optimizer statistics when a new head joins the objective.
            optimizer.reset();
        }

        let order = shuffled_indices(
            train_set.len(),
            derive_seed(train_cfg.seed, &[0x5f1e, epoch as u64]),
        );

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut rollout_count = 0usize;

        for batch in order.chunks(train_cfg.batch_size) {
            let outcomes: Result<Vec<SampleOutcome>> = batch
                .par_iter()
                .map(|&sample| {
                    process_sample(
                        train_set,
                        sample,
                        params,
                        env_cfg,
                        net_cfg,
                        mode,
                        train_cfg.rollouts,
                        derive_seed(train_cfg.seed, &[0xba7c4, epoch as u64, sample as u64]),
                    )
                })
                .collect();
            let outcomes = outcomes?;

            let mut batch_grads = Grads::zeros_like(params);
            for outcome in &outcomes {
                batch_grads.accumulate(&outcome.grads);
                loss_sum += outcome.loss;
                correct += outcome.correct;
                rollout_count += outcome.rollouts;
            }
            batch_grads.scale(1.0 / outcomes.len() as f64);
            if let Some(max_norm) = train_cfg.grad_clip {
                batch_grads.clip(max_norm);
            }
            optimizer.apply(
                params,
                &batch_grads,
                train_cfg.learning_rate,
                train_cfg.beta1,
                train_cfg.beta2,
                train_cfg.epsilon,
            )?;
        }

        let test_acc = stochastic_accuracy(
            params,
            test_set,
            env_cfg,
            net_cfg,
            mode,
            derive_seed(train_cfg.seed, &[0x7e57, epoch as u64]),
        )?;

        let entry = EpochMetrics {
            epoch,
            mode,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / rollout_count.max(1) as f64,
            test_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let keep_going = on_epoch(&entry, params, optimizer)?;
        metrics.push(entry);
        if !keep_going {
            break;
        }
    }

    Ok(metrics)
}
