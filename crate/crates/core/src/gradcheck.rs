//! Central finite-difference verification of the reverse-mode engine.
//!
//! Every check rebuilds the forward pass from scratch around perturbed leaf
//! values, so the numerical derivative is independent of the backward code
//! it certifies. Exposed as library code because the CLI `gradcheck` command
//! runs the same suite as the test targets.

use crate::autograd::{Graph, Tensor, TensorId};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Step used for central differences (f64 throughout keeps this sharp).
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound every differentiable op must meet.
pub const FD_TOL: f64 = 1e-4;

/// Result of one finite-difference check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOL
    }
}

type BuildFn<'a> = dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId> + 'a;

/// Checks `backward` of a scalar-valued builder against central differences
/// at `coords` random leaf coordinates. Relative error is measured as
/// `|fd - grad| / max(1, |grad|)`.
pub fn check_scalar_fn(
    name: &str,
    leaves: &[Tensor],
    build: &BuildFn,
    coords: usize,
    rng: &mut impl Rng,
) -> Result<CheckOutcome> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut graph = Graph::new();
        let ids: Vec<TensorId> = values.iter().map(|t| graph.leaf(t.clone())).collect();
        let root = build(&mut graph, &ids)?;
        if graph.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "gradcheck builder for {name} must produce a scalar"
            )));
        }
        Ok(graph.value(root).item())
    };

    // Analytic gradients once.
    let mut graph = Graph::new();
    let ids: Vec<TensorId> = leaves.iter().map(|t| graph.leaf(t.clone())).collect();
    let root = build(&mut graph, &ids)?;
    graph.backward(root)?;
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| graph.grad(id).expect("leaves are tracked").to_vec())
        .collect();

    let mut max_rel_err: f64 = 0.0;
    for _ in 0..coords {
        let leaf = rng.gen_range(0..leaves.len());
        let elem = rng.gen_range(0..leaves[leaf].len());

        let mut plus = leaves.to_vec();
        plus[leaf].data_mut()[elem] += FD_STEP;
        let mut minus = leaves.to_vec();
        minus[leaf].data_mut()[elem] -= FD_STEP;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);

        let analytic = grads[leaf][elem];
        let rel = (fd - analytic).abs() / analytic.abs().max(1.0);
        max_rel_err = max_rel_err.max(rel);
    }

    Ok(CheckOutcome {
        name: name.to_string(),
        coords,
        max_rel_err,
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Values bounded away from zero so relu's kink never lands inside the
/// finite-difference stencil.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let magnitude = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Runs the finite-difference suite over every differentiable op, `coords`
/// random coordinates each. `detach` is excluded by construction (its
/// contract is that analytic gradients vanish, which finite differences of
/// the full function cannot witness); it is covered by dedicated tests.
pub fn run_suite(coords: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();

    {
        let leaves = vec![
            uniform(&mut rng, &[60], -1.0, 1.0),
            uniform(&mut rng, &[60], -1.0, 1.0),
        ];
        outcomes.push(check_scalar_fn(
            "add",
            &leaves,
            &|g, ids| {
                let s = g.add(ids[0], ids[1])?;
                let q = g.mul(s, s)?;
                Ok(g.sum(q))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![
            uniform(&mut rng, &[60], -1.0, 1.0),
            uniform(&mut rng, &[60], -1.0, 1.0),
        ];
        outcomes.push(check_scalar_fn(
            "mul",
            &leaves,
            &|g, ids| {
                let p = g.mul(ids[0], ids[1])?;
                Ok(g.sum(p))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![uniform(&mut rng, &[120], -1.0, 1.0)];
        outcomes.push(check_scalar_fn(
            "scale",
            &leaves,
            &|g, ids| {
                let q = g.mul(ids[0], ids[0])?;
                let s = g.scale(q, -2.5);
                Ok(g.sum(s))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![uniform(&mut rng, &[120], 0.2, 3.0)];
        outcomes.push(check_scalar_fn(
            "log",
            &leaves,
            &|g, ids| {
                let l = g.log(ids[0]);
                Ok(g.sum(l))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let weights = uniform(&mut rng, &[120], -1.0, 1.0);
        let leaves = vec![away_from_zero(&mut rng, &[120])];
        outcomes.push(check_scalar_fn(
            "relu",
            &leaves,
            &move |g, ids| {
                let r = g.relu(ids[0]);
                let w = g.constant(weights.clone());
                let p = g.mul(r, w)?;
                Ok(g.sum(p))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![uniform(&mut rng, &[110], -1.0, 1.0)];
        outcomes.push(check_scalar_fn(
            "sum",
            &leaves,
            &|g, ids| {
                let s = g.sum(ids[0]);
                g.mul(s, s)
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let weights = uniform(&mut rng, &[40], -1.0, 1.0);
        let leaves = vec![
            uniform(&mut rng, &[40], -1.0, 1.0),
            uniform(&mut rng, &[40], -1.0, 1.0),
            uniform(&mut rng, &[40], -1.0, 1.0),
        ];
        outcomes.push(check_scalar_fn(
            "sum_list",
            &leaves,
            &move |g, ids| {
                let s = g.sum_list(ids)?;
                let w = g.constant(weights.clone());
                let p = g.mul(s, w)?;
                Ok(g.sum(p))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![uniform(&mut rng, &[16], -1.0, 1.0)];
        outcomes.push(check_scalar_fn(
            "select",
            &leaves,
            &|g, ids| {
                let picks: Vec<TensorId> = (0..8)
                    .map(|i| g.select(ids[0], 2 * i))
                    .collect::<Result<_>>()?;
                let s = g.sum_list(&picks)?;
                g.mul(s, s)
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![
            uniform(&mut rng, &[2, 6, 6], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ];
        outcomes.push(check_scalar_fn(
            "conv2d",
            &leaves,
            &|g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2], 1)?;
                let q = g.mul(c, c)?;
                Ok(g.sum(q))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let weights = uniform(&mut rng, &[3, 4, 4], -1.0, 1.0);
        let leaves = vec![
            uniform(&mut rng, &[1, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 4, 4], -1.0, 1.0),
        ];
        outcomes.push(check_scalar_fn(
            "concat_channels",
            &leaves,
            &move |g, ids| {
                let cat = g.concat_channels(ids)?;
                let w = g.constant(weights.clone());
                let p = g.mul(cat, w)?;
                Ok(g.sum(p))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![uniform(&mut rng, &[4, 6, 6], -1.0, 1.0)];
        outcomes.push(check_scalar_fn(
            "global_avg_pool",
            &leaves,
            &|g, ids| {
                let p = g.global_avg_pool(ids[0])?;
                let q = g.mul(p, p)?;
                Ok(g.sum(q))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let leaves = vec![uniform(&mut rng, &[2, 7, 7], -1.0, 1.0)];
        outcomes.push(check_scalar_fn(
            "avg_pool_half",
            &leaves,
            &|g, ids| {
                let p = g.avg_pool_half(ids[0])?;
                let q = g.mul(p, p)?;
                Ok(g.sum(q))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let weights = uniform(&mut rng, &[40], -1.0, 1.0);
        let leaves = vec![uniform(&mut rng, &[40], -2.0, 2.0)];
        outcomes.push(check_scalar_fn(
            "softmax",
            &leaves,
            &move |g, ids| {
                let s = g.softmax(ids[0]);
                let w = g.constant(weights.clone());
                let p = g.mul(s, w)?;
                Ok(g.sum(p))
            },
            coords,
            &mut rng,
        )?);
    }

    {
        let label = Tensor::one_hot(110, 17)?;
        let leaves = vec![uniform(&mut rng, &[110], 0.05, 1.0)];
        outcomes.push(check_scalar_fn(
            "cross_entropy",
            &leaves,
            &move |g, ids| {
                let l = g.constant(label.clone());
                g.cross_entropy(ids[0], l)
            },
            coords,
            &mut rng,
        )?);
    }

    {
        // Network-shaped composite: conv -> relu -> pool -> conv -> gap ->
        // softmax -> cross-entropy, the same chain the heads use.
        let label = Tensor::one_hot(3, 1)?;
        let leaves = vec![
            uniform(&mut rng, &[1, 6, 6], -0.5, 0.5),
            uniform(&mut rng, &[2, 1, 3, 3], -0.5, 0.5),
            uniform(&mut rng, &[2], -0.2, 0.2),
            uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
            uniform(&mut rng, &[3], -0.2, 0.2),
        ];
        outcomes.push(check_scalar_fn(
            "composite_network",
            &leaves,
            &move |g, ids| {
                let c1 = g.conv2d(ids[0], ids[1], ids[2], 1)?;
                let r1 = g.relu(c1);
                let p1 = g.avg_pool_half(r1)?;
                let c2 = g.conv2d(p1, ids[3], ids[4], 1)?;
                let pooled = g.global_avg_pool(c2)?;
                let probs = g.softmax(pooled);
                let l = g.constant(label.clone());
                g.cross_entropy(probs, l)
            },
            coords,
            &mut rng,
        )?);
    }

    Ok(outcomes)
}
