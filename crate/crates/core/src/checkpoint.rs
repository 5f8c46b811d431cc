//! Bit-exact parameter persistence.
//!
//! File layout: an 8-byte magic, a little-endian u64 manifest length, the
//! JSON manifest, then one binary blob of little-endian f64 values. The
//! manifest lists every tensor's name, shape, and byte offset into the blob
//! and echoes the architecture so loads can validate shapes up front.
//! Optimizer moments ride along under an `opt.` name prefix so training can
//! resume exactly.

use crate::autograd::Tensor;
use crate::env::EnvConfig;
use crate::policies::{NetworkConfig, ParamSet, PolicyParams};
use crate::trainer::{AdamState, Mode};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"GLCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    env: EnvConfig,
    net: NetworkConfig,
    mode: Mode,
    trained_epochs: usize,
    tensors: Vec<TensorEntry>,
}

/// A loaded or to-be-saved training snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub env: EnvConfig,
    pub net: NetworkConfig,
    /// Highest stage reached; evaluation uses this to decide which heads
    /// drive goals and actions.
    pub mode: Mode,
    pub trained_epochs: usize,
    pub params: PolicyParams,
    pub optimizer: Option<AdamState>,
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push_tensor = |name: String, shape: Vec<usize>, data: &[f64], blob: &mut Vec<u8>| {
        entries.push(TensorEntry {
            name,
            shape,
            offset: blob.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };

    for (name, tensor) in checkpoint.params.entries() {
        push_tensor(name.to_string(), tensor.shape().to_vec(), tensor.data(), &mut blob);
    }
    if let Some(opt) = &checkpoint.optimizer {
        for ((name, tensor), (m, v)) in checkpoint
            .params
            .entries()
            .zip(opt.first_moment.iter().zip(&opt.second_moment))
        {
            push_tensor(format!("opt.m.{name}"), tensor.shape().to_vec(), m, &mut blob);
            push_tensor(format!("opt.v.{name}"), tensor.shape().to_vec(), v, &mut blob);
        }
        push_tensor("opt.step".into(), vec![1], &[opt.step as f64], &mut blob);
    }

    let manifest = Manifest {
        format: 1,
        env: checkpoint.env,
        net: checkpoint.net,
        mode: checkpoint.mode,
        trained_epochs: checkpoint.trained_epochs,
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    file.write_all(&blob)?;
    Ok(())
}

fn take_tensor(
    blob: &[u8],
    by_name: &HashMap<String, (Vec<usize>, u64)>,
    name: &str,
    expected_shape: &[usize],
) -> Result<Tensor> {
    let (shape, offset) = by_name
        .get(name)
        .ok_or_else(|| Error::Load(format!("checkpoint is missing tensor {name}")))?;
    if shape != expected_shape {
        return Err(Error::Load(format!(
            "tensor {name} has shape {shape:?}, expected {expected_shape:?}"
        )));
    }
    let count: usize = shape.iter().product();
    let start = *offset as usize;
    let end = start + count * 8;
    if blob.len() < end {
        return Err(Error::Load(format!(
            "checkpoint blob truncated: tensor {name} needs bytes {start}..{end}, blob has {}",
            blob.len()
        )));
    }
    let data = blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape.clone(), data)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Load(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Load("checkpoint truncated inside manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::Load(format!("manifest parse failed: {e}")))?;
    let blob = &bytes[16 + manifest_len..];

    let by_name: HashMap<String, (Vec<usize>, u64)> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), (t.shape.clone(), t.offset)))
        .collect();

    let expected = PolicyParams::expected_shapes(&manifest.env, &manifest.net);
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        tensors.push((name.clone(), take_tensor(blob, &by_name, name, shape)?));
    }
    let goal_count = expected.iter().filter(|(n, _)| n.starts_with("goal.")).count();
    let action_count = expected
        .iter()
        .filter(|(n, _)| n.starts_with("action."))
        .count();
    let mut it = tensors.into_iter();
    let params = PolicyParams {
        goal: ParamSet::new(it.by_ref().take(goal_count).collect()),
        action: ParamSet::new(it.by_ref().take(action_count).collect()),
        classifier: ParamSet::new(it.collect()),
    };

    let optimizer = if by_name.contains_key("opt.step") {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, shape) in &expected {
            first.push(take_tensor(blob, &by_name, &format!("opt.m.{name}"), shape)?.data().to_vec());
            second.push(take_tensor(blob, &by_name, &format!("opt.v.{name}"), shape)?.data().to_vec());
        }
        let step = take_tensor(blob, &by_name, "opt.step", &[1])?.item() as u64;
        Some(AdamState {
            first_moment: first,
            second_moment: second,
            step,
        })
    } else {
        None
    };

    Ok(Checkpoint {
        env: manifest.env,
        net: manifest.net,
        mode: manifest.mode,
        trained_epochs: manifest.trained_epochs,
        params,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::trainer::NetHandles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny() -> (EnvConfig, NetworkConfig) {
        (
            EnvConfig {
                n: 8,
                c: 1,
                m: 3,
                step: 2,
                episodes: 2,
                horizon: 2,
            },
            NetworkConfig {
                kernel: 3,
                planner_width: 2,
                planner_blocks: 1,
                classifier_base: 2,
                classifier_blocks: 2,
                classes: 4,
            },
        )
    }

    fn classify(params: &PolicyParams, env: &EnvConfig, net: &NetworkConfig) -> Vec<f64> {
        let mut graph = Graph::new();
        let nets = NetHandles::insert(&mut graph, params, env, net, Mode::ClassifierOnly, false);
        let data = (0..64).map(|i| (i as f64) / 64.0 - 0.5).collect();
        let input = graph.constant(Tensor::new(vec![1, 8, 8], data).unwrap());
        let out = nets
            .classifier_arch
            .forward(&mut graph, input, &nets.classifier_ids)
            .unwrap();
        graph.value(out).data().to_vec()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (env, net) = tiny();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let params = PolicyParams::init(&env, &net, &mut rng).unwrap();
        let mut opt = AdamState::new(&params);
        opt.step = 17;
        opt.first_moment[0][0] = 0.125;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let checkpoint = Checkpoint {
            env,
            net,
            mode: Mode::GoalPlanning,
            trained_epochs: 5,
            params: params.clone(),
            optimizer: Some(opt.clone()),
        };
        save(&path, &checkpoint).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.mode, Mode::GoalPlanning);
        assert_eq!(loaded.trained_epochs, 5);
        for ((name_a, a), (name_b, b)) in params.entries().zip(loaded.params.entries()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let opt_loaded = loaded.optimizer.unwrap();
        assert_eq!(opt_loaded.step, 17);
        assert_eq!(opt_loaded.first_moment[0][0].to_bits(), 0.125f64.to_bits());

        // Forward outputs are bit-identical through the round trip.
        let before = classify(&params, &env, &net);
        let after = classify(&loaded.params, &loaded.env, &loaded.net);
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn load_rejects_corruption() {
        let (env, net) = tiny();
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let params = PolicyParams::init(&env, &net, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(
            &path,
            &Checkpoint {
                env,
                net,
                mode: Mode::ClassifierOnly,
                trained_epochs: 0,
                params,
                optimizer: None,
            },
        )
        .unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load(&path).is_err());

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&path, &corrupted).unwrap();
        assert!(load(&path).is_err());
    }
}
