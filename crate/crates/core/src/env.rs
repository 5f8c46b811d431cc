//! Partially observable image-exploration environment.
//!
//! The agent owns an `m x m` observation window over a hidden `c x n x n`
//! image. Moving the window reveals pixels permanently. Alongside the
//! revealed image the environment maintains three single-channel masks:
//! the current window position, the visit history, and the active goal
//! patch. Coordinates are `(col, row)` with the pose anchored at the
//! window's top-left corner; "vertical" moves change the row.

use crate::autograd::Tensor;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Geometry and budget of one exploration task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Image side length in pixels.
    pub n: usize,
    /// Image channels.
    pub c: usize,
    /// Observation patch side length.
    pub m: usize,
    /// Pixels moved per action.
    pub step: usize,
    /// Number of episodes, one goal each.
    pub episodes: usize,
    /// Actions per episode.
    pub horizon: usize,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.n {
            return Err(Error::Config(format!(
                "patch size m={} must satisfy 1 <= m <= n={}",
                self.m, self.n
            )));
        }
        if self.step == 0 {
            return Err(Error::Config("step must be >= 1".into()));
        }
        if self.episodes == 0 || self.horizon == 0 {
            return Err(Error::Config("episodes and horizon must be >= 1".into()));
        }
        if self.c == 0 {
            return Err(Error::Config("channel count must be >= 1".into()));
        }
        Ok(())
    }

    /// Largest valid pose coordinate (`n - m`).
    pub fn pose_max(&self) -> usize {
        self.n - self.m
    }

    pub fn total_steps(&self) -> usize {
        self.episodes * self.horizon
    }

    /// Channel count of the planner inputs: image channels plus the three
    /// mask channels (position, history, goal).
    pub fn planner_channels(&self) -> usize {
        self.c + 3
    }
}

/// Top-left corner of the goal patch, clamped to the valid pose range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Goal {
    pub col: usize,
    pub row: usize,
}

/// Movement direction of one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Vertical,
    Horizontal,
}

impl Axis {
    /// Index into the action-probability vector (recorded convention:
    /// vertical is 0, horizontal is 1).
    pub fn index(self) -> usize {
        match self {
            Axis::Vertical => 0,
            Axis::Horizontal => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::Vertical => "vertical",
            Axis::Horizontal => "horizontal",
        }
    }
}

/// Outcome of the action protocol at one step: when the pose is aligned
/// with the goal on an axis (within one stride), the move on the other
/// axis is dictated; otherwise the action distribution decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionRule {
    ForceVertical,
    ForceHorizontal,
    Free,
}

impl ActionRule {
    pub fn is_forced(self) -> bool {
        !matches!(self, ActionRule::Free)
    }

    /// The dictated axis, when forced.
    pub fn forced_axis(self) -> Option<Axis> {
        match self {
            ActionRule::ForceVertical => Some(Axis::Vertical),
            ActionRule::ForceHorizontal => Some(Axis::Horizontal),
            ActionRule::Free => None,
        }
    }

    pub fn permits(self, axis: Axis) -> bool {
        match self.forced_axis() {
            Some(forced) => forced == axis,
            None => true,
        }
    }
}

/// Protocol: vertical is dictated when the columns already agree (within one
/// stride), else horizontal is dictated when the rows agree; otherwise both
/// moves head toward the goal and the choice is free. When both axes agree
/// the rule is vertical with zero displacement: the agent idles at the goal.
pub fn action_rule(pose: (usize, usize), goal: Goal, step: usize) -> ActionRule {
    if pose.0.abs_diff(goal.col) < step {
        ActionRule::ForceVertical
    } else if pose.1.abs_diff(goal.row) < step {
        ActionRule::ForceHorizontal
    } else {
        ActionRule::Free
    }
}

/// Masks and revealed image frozen at an episode boundary; the goal-planner
/// input is built from these so that mid-episode reveals never leak into it.
#[derive(Clone)]
struct EpisodeSnapshot {
    revealed: Tensor,
    position_mask: Tensor,
    history_mask: Tensor,
    goal_mask: Tensor,
}

/// Full environment state. A value object: cloning forks the trajectory.
#[derive(Clone)]
pub struct EnvState {
    cfg: EnvConfig,
    image: Tensor,
    pose: (usize, usize),
    revealed: Tensor,
    position_mask: Tensor,
    history_mask: Tensor,
    goal_mask: Tensor,
    goal: Option<Goal>,
    episode: usize,
    step_in_episode: usize,
    steps_taken: usize,
    episode_start: EpisodeSnapshot,
}

impl EnvState {
    /// Starts a trajectory at a uniformly random pose.
    pub fn reset(image: Tensor, cfg: EnvConfig, rng: &mut impl Rng) -> Result<EnvState> {
        cfg.validate()?;
        let max = cfg.pose_max();
        let pose = (rng.gen_range(0..=max), rng.gen_range(0..=max));
        EnvState::reset_at(image, cfg, pose)
    }

    /// Starts a trajectory at a fixed pose (rollouts of one data point share
    /// their initial setting).
    pub fn reset_at(image: Tensor, cfg: EnvConfig, pose: (usize, usize)) -> Result<EnvState> {
        cfg.validate()?;
        if image.shape() != [cfg.c, cfg.n, cfg.n] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match config [{}, {}, {}]",
                image.shape(),
                cfg.c,
                cfg.n,
                cfg.n
            )));
        }
        if pose.0 > cfg.pose_max() || pose.1 > cfg.pose_max() {
            return Err(Error::Usage(format!(
                "pose {pose:?} outside [0, {}]^2",
                cfg.pose_max()
            )));
        }
        let mut state = EnvState {
            cfg,
            image,
            pose,
            revealed: Tensor::zeros(&[cfg.c, cfg.n, cfg.n]),
            position_mask: Tensor::ones(&[cfg.n, cfg.n]),
            history_mask: Tensor::ones(&[cfg.n, cfg.n]),
            goal_mask: Tensor::ones(&[cfg.n, cfg.n]),
            goal: None,
            episode: 0,
            step_in_episode: 0,
            steps_taken: 0,
            episode_start: EpisodeSnapshot {
                revealed: Tensor::zeros(&[cfg.c, cfg.n, cfg.n]),
                position_mask: Tensor::ones(&[cfg.n, cfg.n]),
                history_mask: Tensor::ones(&[cfg.n, cfg.n]),
                goal_mask: Tensor::ones(&[cfg.n, cfg.n]),
            },
        };
        state.reveal_current_patch();
        state.take_snapshot();
        Ok(state)
    }

    fn reveal_current_patch(&mut self) {
        let (n, m, c) = (self.cfg.n, self.cfg.m, self.cfg.c);
        let (col, row) = self.pose;
        for ch in 0..c {
            for y in row..row + m {
                let base = ch * n * n + y * n;
                let src = &self.image.data()[base + col..base + col + m];
                let src = src.to_vec();
                self.revealed.data_mut()[base + col..base + col + m].copy_from_slice(&src);
            }
        }
        self.position_mask.data_mut().fill(1.0);
        for y in row..row + m {
            for x in col..col + m {
                self.position_mask.data_mut()[y * n + x] = 0.0;
                self.history_mask.data_mut()[y * n + x] = 0.0;
            }
        }
    }

    fn take_snapshot(&mut self) {
        self.episode_start = EpisodeSnapshot {
            revealed: self.revealed.clone(),
            position_mask: self.position_mask.clone(),
            history_mask: self.history_mask.clone(),
            goal_mask: self.goal_mask.clone(),
        };
    }

    /// Installs the episode goal from a flat index into the full `n x n`
    /// map (sampling support is the whole map; the mask anchor is clamped
    /// into the valid pose range).
    pub fn set_goal(&mut self, flat_index: usize) -> Result<Goal> {
        let n = self.cfg.n;
        if flat_index >= n * n {
            return Err(Error::Usage(format!(
                "goal index {flat_index} out of range for {n}x{n} map"
            )));
        }
        let max = self.cfg.pose_max();
        let goal = Goal {
            col: (flat_index % n).min(max),
            row: (flat_index / n).min(max),
        };
        self.goal_mask.data_mut().fill(1.0);
        for y in goal.row..goal.row + self.cfg.m {
            for x in goal.col..goal.col + self.cfg.m {
                self.goal_mask.data_mut()[y * n + x] = 0.0;
            }
        }
        self.goal = Some(goal);
        Ok(goal)
    }

    /// Action protocol at the current pose.
    pub fn action_rule(&self) -> Result<ActionRule> {
        let goal = self
            .goal
            .ok_or_else(|| Error::Usage("action_rule before set_goal".into()))?;
        Ok(action_rule(self.pose, goal, self.cfg.step))
    }

    /// Takes one action: moves `step` pixels along `axis` toward the goal
    /// (zero displacement when already aligned), clamped at the borders,
    /// then reveals the new patch and advances the counters.
    ///
    /// Callers are expected to pass an axis consistent with [`action_rule`]
    /// when the rule is forced; the dynamics themselves stay well-defined
    /// (and clamped) either way.
    pub fn step(&mut self, axis: Axis) -> Result<()> {
        if self.steps_taken >= self.cfg.total_steps() {
            return Err(Error::Usage(format!(
                "trajectory budget of {} steps exhausted",
                self.cfg.total_steps()
            )));
        }
        let goal = self
            .goal
            .ok_or_else(|| Error::Usage("step before set_goal".into()))?;
        let max = self.cfg.pose_max() as isize;
        let stride = self.cfg.step as isize;
        let shift = |from: usize, to: usize| -> usize {
            let delta = match to.cmp(&from) {
                std::cmp::Ordering::Greater => stride,
                std::cmp::Ordering::Less => -stride,
                std::cmp::Ordering::Equal => 0,
            };
            (from as isize + delta).clamp(0, max) as usize
        };
        match axis {
            Axis::Vertical => self.pose.1 = shift(self.pose.1, goal.row),
            Axis::Horizontal => self.pose.0 = shift(self.pose.0, goal.col),
        }
        self.reveal_current_patch();
        self.steps_taken += 1;
        self.step_in_episode += 1;
        if self.step_in_episode == self.cfg.horizon {
            self.step_in_episode = 0;
            self.episode += 1;
            self.take_snapshot();
        }
        Ok(())
    }

    /// Inputs for the two planners. The goal-planner input is built from the
    /// episode-start snapshot (previous episode's goal mask included); the
    /// action-planner input reflects the current step and the current goal.
    /// Channel order: revealed image, position mask, history mask, goal mask.
    pub fn planner_inputs(&self) -> (Tensor, Tensor) {
        let snap = &self.episode_start;
        let goal_input = Tensor::stack_channels(&[
            &snap.revealed,
            &snap.position_mask,
            &snap.history_mask,
            &snap.goal_mask,
        ])
        .expect("snapshot shapes are consistent");
        let action_input = Tensor::stack_channels(&[
            &self.revealed,
            &self.position_mask,
            &self.history_mask,
            &self.goal_mask,
        ])
        .expect("state shapes are consistent");
        (goal_input, action_input)
    }

    /// The classifier sees the final revealed image only.
    pub fn classifier_input(&self) -> Tensor {
        self.revealed.clone()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn pose(&self) -> (usize, usize) {
        self.pose
    }

    pub fn goal(&self) -> Option<Goal> {
        self.goal
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn step_in_episode(&self) -> usize {
        self.step_in_episode
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn revealed(&self) -> &Tensor {
        &self.revealed
    }

    pub fn position_mask(&self) -> &Tensor {
        &self.position_mask
    }

    pub fn history_mask(&self) -> &Tensor {
        &self.history_mask
    }

    pub fn goal_mask(&self) -> &Tensor {
        &self.goal_mask
    }

    /// Renders the revealed image as a binary PGM (P5). Pixel values are
    /// mapped from [-0.5, 0.5] to 0..=255 (channels averaged when c > 1).
    /// With `markers`, the current window border is burned in at gray 255
    /// and the goal patch border at gray 176.
    pub fn render_pgm(&self, markers: bool) -> Vec<u8> {
        let n = self.cfg.n;
        let m = self.cfg.m;
        let mut gray = vec![0u8; n * n];
        for (i, g) in gray.iter_mut().enumerate() {
            let mut v = 0.0;
            for ch in 0..self.cfg.c {
                v += self.revealed.data()[ch * n * n + i];
            }
            v /= self.cfg.c as f64;
            *g = ((v + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        if markers {
            let mut outline = |col: usize, row: usize, level: u8| {
                for y in row..row + m {
                    for x in col..col + m {
                        let border =
                            y == row || y == row + m - 1 || x == col || x == col + m - 1;
                        if border {
                            gray[y * n + x] = level;
                        }
                    }
                }
            };
            if let Some(goal) = self.goal {
                outline(goal.col, goal.row, 176);
            }
            outline(self.pose.0, self.pose.1, 255);
        }
        let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
        out.extend_from_slice(&gray);
        out
    }
}
