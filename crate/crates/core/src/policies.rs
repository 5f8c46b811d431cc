//! The three convolutional heads and the sampling procedures that turn
//! their outputs into goals, actions, and predictions.
//!
//! All heads are fully convolutional with concatenation skip connections
//! and no normalization layers. The planners keep the spatial size (padding
//! `(k-1)/2`) and a fixed width per conv; the classifier doubles its width
//! per block and halves the spatial size between blocks. Every head ends in
//! global average pooling and/or a softmax, so outputs are probability
//! vectors or maps regardless of input scale.

use crate::autograd::{Graph, Tensor, TensorId};
use crate::env::{ActionRule, Axis, EnvConfig};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sizes of the three heads. The underlying publication fixes only the
/// channel-plan shapes (constant width for planners, doubling for the
/// classifier); the concrete numbers here are configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Conv kernel side (odd; padding is (kernel-1)/2 everywhere).
    pub kernel: usize,
    /// Channels per planner conv.
    pub planner_width: usize,
    /// Repeated conv blocks per planner.
    pub planner_blocks: usize,
    /// First-block width of the classifier; doubled each block.
    pub classifier_base: usize,
    /// Conv blocks in the classifier.
    pub classifier_blocks: usize,
    /// Class count D.
    pub classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            kernel: 3,
            planner_width: 8,
            planner_blocks: 3,
            classifier_base: 8,
            classifier_blocks: 3,
            classes: 10,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.planner_width == 0 || self.classifier_base == 0 {
            return Err(Error::Config("conv widths must be >= 1".into()));
        }
        if self.planner_blocks == 0 || self.classifier_blocks == 0 {
            return Err(Error::Config("block counts must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Ordered, named collection of parameter tensors for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> ParamSet {
        ParamSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Inserts every tensor into the graph, as trainable leaves or frozen
    /// constants, preserving order.
    pub fn insert_into(&self, graph: &mut Graph, trainable: bool) -> Vec<TensorId> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect()
    }
}

/// One conv layer's dimensions within a head.
#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
}

fn init_conv(
    name: &str,
    spec: ConvSpec,
    kernel: usize,
    rng: &mut impl Rng,
    out: &mut Vec<(String, Tensor)>,
) {
    // Fan-in scaled uniform init keeps every softmax near-uniform at start.
    let scale = (1.0 / (spec.in_ch * kernel * kernel) as f64).sqrt();
    let weights = (0..spec.out_ch * spec.in_ch * kernel * kernel)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    out.push((
        format!("{name}.kernel"),
        Tensor::new(
            vec![spec.out_ch, spec.in_ch, kernel, kernel],
            weights,
        )
        .expect("consistent shape"),
    ));
    out.push((format!("{name}.bias"), Tensor::zeros(&[spec.out_ch])));
}

/// A planner head: `blocks` convs of fixed width with concat skips, then a
/// conv down to `out_channels` (1 for the goal map, 2 for the action pair).
#[derive(Debug, Clone, Copy)]
pub struct PlannerArch {
    pub in_channels: usize,
    pub out_channels: usize,
    pub blocks: usize,
    pub width: usize,
    pub kernel: usize,
}

impl PlannerArch {
    pub fn goal(net: &NetworkConfig, env: &EnvConfig) -> PlannerArch {
        PlannerArch {
            in_channels: env.planner_channels(),
            out_channels: 1,
            blocks: net.planner_blocks,
            width: net.planner_width,
            kernel: net.kernel,
        }
    }

    pub fn action(net: &NetworkConfig, env: &EnvConfig) -> PlannerArch {
        PlannerArch {
            out_channels: 2,
            ..PlannerArch::goal(net, env)
        }
    }

    fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::with_capacity(self.blocks + 1);
        let mut channels = self.in_channels;
        for _ in 0..self.blocks {
            specs.push(ConvSpec {
                in_ch: channels,
                out_ch: self.width,
            });
            channels += self.width; // concat skip
        }
        specs.push(ConvSpec {
            in_ch: channels,
            out_ch: self.out_channels,
        });
        specs
    }

    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        for (i, spec) in self.conv_specs().iter().enumerate() {
            let name = if i < self.blocks {
                format!("{prefix}.block{i}")
            } else {
                format!("{prefix}.head")
            };
            shapes.push((
                format!("{name}.kernel"),
                vec![spec.out_ch, spec.in_ch, self.kernel, self.kernel],
            ));
            shapes.push((format!("{name}.bias"), vec![spec.out_ch]));
        }
        shapes
    }

    pub fn init(&self, prefix: &str, rng: &mut impl Rng) -> ParamSet {
        let mut entries = Vec::new();
        for (i, spec) in self.conv_specs().iter().enumerate() {
            let name = if i < self.blocks {
                format!("{prefix}.block{i}")
            } else {
                format!("{prefix}.head")
            };
            init_conv(&name, *spec, self.kernel, rng, &mut entries);
        }
        ParamSet::new(entries)
    }

    /// Runs the conv stack up to the pre-pool head output (`out_channels`
    /// spatial maps, same n x n size as the input).
    fn feature_maps(
        &self,
        graph: &mut Graph,
        input: TensorId,
        params: &[TensorId],
    ) -> Result<TensorId> {
        let padding = (self.kernel - 1) / 2;
        let mut x = input;
        for block in 0..self.blocks {
            let conv = graph.conv2d(x, params[2 * block], params[2 * block + 1], padding)?;
            let act = graph.relu(conv);
            x = graph.concat_channels(&[act, x])?;
        }
        graph.conv2d(x, params[2 * self.blocks], params[2 * self.blocks + 1], padding)
    }
}

/// Goal head: single-channel map, softmax over all n^2 entries.
pub fn goal_forward(
    arch: &PlannerArch,
    graph: &mut Graph,
    input: TensorId,
    params: &[TensorId],
) -> Result<TensorId> {
    let maps = arch.feature_maps(graph, input, params)?;
    Ok(graph.softmax(maps))
}

/// Action head: two-channel map, global average pooling, softmax. Index 0 is
/// the vertical move, index 1 the horizontal one.
pub fn action_forward(
    arch: &PlannerArch,
    graph: &mut Graph,
    input: TensorId,
    params: &[TensorId],
) -> Result<TensorId> {
    let maps = arch.feature_maps(graph, input, params)?;
    let pooled = graph.global_avg_pool(maps)?;
    Ok(graph.softmax(pooled))
}

/// Classifier: width doubles per block, spatial size halves between blocks,
/// D-channel head, global average pooling, softmax.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub classes: usize,
    pub blocks: usize,
    pub base_width: usize,
    pub kernel: usize,
}

impl ClassifierArch {
    pub fn new(net: &NetworkConfig, env: &EnvConfig) -> ClassifierArch {
        ClassifierArch {
            in_channels: env.c,
            classes: net.classes,
            blocks: net.classifier_blocks,
            base_width: net.classifier_base,
            kernel: net.kernel,
        }
    }

    fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::with_capacity(self.blocks + 1);
        let mut channels = self.in_channels;
        for block in 0..self.blocks {
            let width = self.base_width << block;
            specs.push(ConvSpec {
                in_ch: channels,
                out_ch: width,
            });
            channels += width;
        }
        specs.push(ConvSpec {
            in_ch: channels,
            out_ch: self.classes,
        });
        specs
    }

    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        for (i, spec) in self.conv_specs().iter().enumerate() {
            let name = if i < self.blocks {
                format!("{prefix}.block{i}")
            } else {
                format!("{prefix}.head")
            };
            shapes.push((
                format!("{name}.kernel"),
                vec![spec.out_ch, spec.in_ch, self.kernel, self.kernel],
            ));
            shapes.push((format!("{name}.bias"), vec![spec.out_ch]));
        }
        shapes
    }

    pub fn init(&self, prefix: &str, rng: &mut impl Rng) -> ParamSet {
        let mut entries = Vec::new();
        for (i, spec) in self.conv_specs().iter().enumerate() {
            let name = if i < self.blocks {
                format!("{prefix}.block{i}")
            } else {
                format!("{prefix}.head")
            };
            init_conv(&name, *spec, self.kernel, rng, &mut entries);
        }
        ParamSet::new(entries)
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        input: TensorId,
        params: &[TensorId],
    ) -> Result<TensorId> {
        let padding = (self.kernel - 1) / 2;
        let mut x = input;
        for block in 0..self.blocks {
            let conv = graph.conv2d(x, params[2 * block], params[2 * block + 1], padding)?;
            let act = graph.relu(conv);
            x = graph.concat_channels(&[act, x])?;
            if block + 1 < self.blocks {
                x = graph.avg_pool_half(x)?;
            }
        }
        let maps = graph.conv2d(x, params[2 * self.blocks], params[2 * self.blocks + 1], padding)?;
        let pooled = graph.global_avg_pool(maps)?;
        Ok(graph.softmax(pooled))
    }
}

/// The trainable parameters of all three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub goal: ParamSet,
    pub action: ParamSet,
    pub classifier: ParamSet,
}

impl PolicyParams {
    pub fn init(env: &EnvConfig, net: &NetworkConfig, rng: &mut impl Rng) -> Result<PolicyParams> {
        env.validate()?;
        net.validate()?;
        Ok(PolicyParams {
            goal: PlannerArch::goal(net, env).init("goal", rng),
            action: PlannerArch::action(net, env).init("action", rng),
            classifier: ClassifierArch::new(net, env).init("classifier", rng),
        })
    }

    /// All tensors in the fixed order goal, action, classifier.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.goal
            .iter()
            .chain(self.action.iter())
            .chain(self.classifier.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.goal
            .tensors_mut()
            .chain(self.action.tensors_mut())
            .chain(self.classifier.tensors_mut())
    }

    pub fn tensor_count(&self) -> usize {
        self.goal.len() + self.action.len() + self.classifier.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries().map(|(_, t)| t.len()).sum()
    }

    /// Expected names and shapes for the given configuration, in the same
    /// order as [`PolicyParams::entries`].
    pub fn expected_shapes(env: &EnvConfig, net: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
        let mut shapes = PlannerArch::goal(net, env).param_shapes("goal");
        shapes.extend(PlannerArch::action(net, env).param_shapes("action"));
        shapes.extend(ClassifierArch::new(net, env).param_shapes("classifier"));
        shapes
    }
}

/// Result of drawing (or being forced into) one action.
#[derive(Debug, Clone, Copy)]
pub struct ActionChoice {
    pub axis: Axis,
    /// Log-probability node, present only when the action distribution
    /// actually decided the move.
    pub log_prob: Option<TensorId>,
    /// The chi flag: true when the action came from the distribution.
    pub sampled: bool,
}

/// Draws a flat goal index from a probability map node and returns the index
/// with its differentiable log-probability.
pub fn sample_goal(
    graph: &mut Graph,
    goal_probs: TensorId,
    rng: &mut impl Rng,
) -> Result<(usize, TensorId)> {
    let index = sample_categorical(graph.value(goal_probs).data(), rng);
    let picked = graph.select(goal_probs, index)?;
    let log_prob = graph.log(picked);
    Ok((index, log_prob))
}

/// Applies the action protocol: forced moves bypass the distribution
/// entirely (no log-probability, chi = 0); free moves sample from it.
pub fn sample_action(
    graph: &mut Graph,
    action_probs: TensorId,
    rule: ActionRule,
    rng: &mut impl Rng,
) -> Result<ActionChoice> {
    if let Some(axis) = rule.forced_axis() {
        return Ok(ActionChoice {
            axis,
            log_prob: None,
            sampled: false,
        });
    }
    let index = sample_categorical(graph.value(action_probs).data(), rng);
    let axis = if index == 0 {
        Axis::Vertical
    } else {
        Axis::Horizontal
    };
    let picked = graph.select(action_probs, index)?;
    let log_prob = graph.log(picked);
    Ok(ActionChoice {
        axis,
        log_prob: Some(log_prob),
        sampled: true,
    })
}

/// Goal choice for i.i.d. planning: uniform over all map pixels.
pub fn iid_goal(map_len: usize, rng: &mut impl Rng) -> usize {
    rng.gen_range(0..map_len)
}

/// Action choice for i.i.d. planning: the forced-axis rule still applies;
/// free moves are a fair coin.
pub fn iid_action(rule: ActionRule, rng: &mut impl Rng) -> Axis {
    match rule.forced_axis() {
        Some(axis) => axis,
        None => {
            if rng.gen_bool(0.5) {
                Axis::Vertical
            } else {
                Axis::Horizontal
            }
        }
    }
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if draw < cumulative {
            return i;
        }
    }
    probs.len() - 1
}
