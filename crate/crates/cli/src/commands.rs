//! Command implementations behind the CLI surface.

use crate::config::RunConfig;
use glimpse_core::autograd::Graph;
use glimpse_core::checkpoint::{self, Checkpoint};
use glimpse_core::data::{load_idx, subset, Dataset};
use glimpse_core::env::{EnvConfig, EnvState};
use glimpse_core::eval::{evaluate_classifier_full, evaluate_policy};
use glimpse_core::gradcheck;
use glimpse_core::policies::{
    action_forward, goal_forward, iid_action, iid_goal, sample_action, sample_goal, NetworkConfig,
    PolicyParams,
};
use glimpse_core::trainer::{
    enumerate_grad_check, train, AdamState, Mode, NetHandles, OracleInstance,
};
use glimpse_core::{derive_seed, Error, Result};
use glimpse_core::autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

fn idx_path(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Load(format!(
        "dataset file {stem}[.gz] not found under {}",
        dir.display()
    )))
}

/// Loads the train and test splits from the resolved data directory.
pub fn load_splits(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dir = config.resolve_data_dir();
    let train_set = load_idx(
        &idx_path(&dir, "train-images-idx3-ubyte")?,
        &idx_path(&dir, "train-labels-idx1-ubyte")?,
    )?;
    let test_set = load_idx(
        &idx_path(&dir, "t10k-images-idx3-ubyte")?,
        &idx_path(&dir, "t10k-labels-idx1-ubyte")?,
    )?;
    let train_set = match config.train_per_class {
        Some(per_class) => subset(&train_set, per_class, derive_seed(config.train.seed, &[0xd474, 0]))?,
        None => train_set,
    };
    let test_set = match config.test_per_class {
        Some(per_class) => subset(&test_set, per_class, derive_seed(config.train.seed, &[0xd474, 1]))?,
        None => test_set,
    };
    Ok((train_set, test_set))
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    Ok(())
}

pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    ensure_out_dir(config)?;
    let (train_set, test_set) = load_splits(config)?;
    println!(
        "training on {} samples, evaluating on {}",
        train_set.len(),
        test_set.len()
    );

    let (mut params, mut optimizer, start_epoch) = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.env != config.env || ckpt.net != config.net {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different env/net configuration",
                    path.display()
                )));
            }
            let optimizer = ckpt
                .optimizer
                .unwrap_or_else(|| AdamState::new(&ckpt.params));
            println!(
                "resuming from {} after {} epochs",
                path.display(),
                ckpt.trained_epochs
            );
            (ckpt.params, optimizer, ckpt.trained_epochs)
        }
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.train.seed, &[0x1417]));
            let params = PolicyParams::init(&config.env, &config.net, &mut rng)?;
            let optimizer = AdamState::new(&params);
            (params, optimizer, 0)
        }
    };

    let metrics_path = config.out_dir.join("metrics.csv");
    if start_epoch == 0 || !metrics_path.exists() {
        std::fs::write(&metrics_path, "epoch,mode,train_loss,train_acc,test_acc,wall_seconds\n")?;
    }

    let epoch_modes = config.train.epoch_modes();
    let out_dir = config.out_dir.clone();
    let env = config.env;
    let net = config.net;
    train(
        &train_set,
        &test_set,
        &mut params,
        &mut optimizer,
        &config.env,
        &config.net,
        &config.train,
        start_epoch,
        |metrics, params, optimizer| {
            println!(
                "epoch {:>3} mode {:<3} loss {:.4} train_acc {:.4} test_acc {:.4} ({:.1}s)",
                metrics.epoch,
                metrics.mode.label(),
                metrics.train_loss,
                metrics.train_acc,
                metrics.test_acc,
                metrics.wall_seconds
            );
            let mut file = std::fs::OpenOptions::new()
                .append(true)
                .open(&metrics_path)?;
            writeln!(
                file,
                "{},{},{},{},{},{}",
                metrics.epoch,
                metrics.mode.label(),
                metrics.train_loss,
                metrics.train_acc,
                metrics.test_acc,
                metrics.wall_seconds
            )?;
            let snapshot = Checkpoint {
                env,
                net,
                mode: epoch_modes[..=metrics.epoch]
                    .iter()
                    .copied()
                    .max()
                    .expect("non-empty schedule"),
                trained_epochs: metrics.epoch + 1,
                params: params.clone(),
                optimizer: Some(optimizer.clone()),
            };
            checkpoint::save(&out_dir.join(format!("checkpoint_epoch{:03}.ckpt", metrics.epoch)), &snapshot)?;
            checkpoint::save(&out_dir.join("checkpoint_latest.ckpt"), &snapshot)?;
            Ok(true)
        },
    )?;
    println!("done; metrics at {}", metrics_path.display());
    Ok(())
}

pub fn cmd_eval(config: &RunConfig, checkpoint_path: &Path, runs: Option<usize>) -> Result<()> {
    ensure_out_dir(config)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    let (_, test_set) = load_splits_for(config, &ckpt)?;
    let runs = runs.unwrap_or(config.eval_runs);
    let report = evaluate_policy(
        &ckpt.params,
        &test_set,
        &ckpt.env,
        &ckpt.net,
        ckpt.mode,
        runs,
        0.05,
        derive_seed(config.train.seed, &[0xe7a1]),
    )?;
    println!(
        "top-1 accuracy: {:.4} +/- {:.4} ({} runs, alpha 0.05)",
        report.top1_mean, report.top1_half_width, report.runs
    );
    println!(
        "top-2 accuracy: {:.4} +/- {:.4}",
        report.top2_mean, report.top2_half_width
    );

    let confusion_path = config.out_dir.join("confusion.csv");
    let mut out = String::new();
    for row in &report.confusion {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(&confusion_path, out)?;
    println!("confusion matrix written to {}", confusion_path.display());
    Ok(())
}

fn load_splits_for(config: &RunConfig, ckpt: &Checkpoint) -> Result<(Dataset, Dataset)> {
    if ckpt.net.classes != config.net.classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes, config says {}",
            ckpt.net.classes, config.net.classes
        )));
    }
    load_splits(config)
}

pub fn cmd_eval_classifier(config: &RunConfig, checkpoint_path: &Path) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let (_, test_set) = load_splits_for(config, &ckpt)?;
    let (top1, top2) = evaluate_classifier_full(&ckpt.params, &test_set, &ckpt.env, &ckpt.net)?;
    println!("isolated classifier on complete images:");
    println!("top-1 accuracy: {top1:.4}");
    println!("top-2 accuracy: {top2:.4}");
    Ok(())
}

fn parse_snapshots(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (e, t) = pair
                .split_once(',')
                .ok_or_else(|| Error::Usage(format!("snapshot {pair:?} is not e,t")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Usage(format!("snapshot coordinate {s:?} is not an integer")))
            };
            Ok((parse(e)?, parse(t)?))
        })
        .collect()
}

pub fn cmd_rollout(
    config: &RunConfig,
    checkpoint_path: &Path,
    image_index: usize,
    snapshots: Option<&str>,
) -> Result<()> {
    ensure_out_dir(config)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    let (_, test_set) = load_splits_for(config, &ckpt)?;
    if image_index >= test_set.len() {
        return Err(Error::Usage(format!(
            "image index {image_index} out of range for {} test samples",
            test_set.len()
        )));
    }
    let env = ckpt.env;
    let requested: Vec<(usize, usize)> = match snapshots {
        Some(spec) => parse_snapshots(spec)?,
        None => {
            // Beginning of every episode plus the end of the last one.
            let mut defaults: Vec<(usize, usize)> =
                (0..env.episodes).map(|e| (e, 0)).collect();
            defaults.push((env.episodes - 1, env.horizon - 1));
            defaults
        }
    };
    for &(e, t) in &requested {
        if e >= env.episodes || t >= env.horizon {
            return Err(Error::Usage(format!(
                "snapshot ({e},{t}) outside {} episodes x {} steps",
                env.episodes, env.horizon
            )));
        }
    }

    let image = test_set.image(image_index);
    let label = test_set.label(image_index);
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
        config.train.seed,
        &[0x57a9, image_index as u64],
    ));
    let max = env.pose_max();
    let pose = (rng.gen_range(0..=max), rng.gen_range(0..=max));

    let mut graph = Graph::new();
    let nets = NetHandles::insert(&mut graph, &ckpt.params, &env, &ckpt.net, ckpt.mode, false);
    let mut state = EnvState::reset_at(image.clone(), env, pose)?;

    let render = |state: &EnvState, e: usize, t: usize, out_dir: &Path| -> Result<()> {
        std::fs::write(
            out_dir.join(format!("snapshot_e{e}_t{t}.pgm")),
            state.render_pgm(true),
        )?;
        std::fs::write(
            out_dir.join(format!("snapshot_e{e}_t{t}_raw.pgm")),
            state.render_pgm(false),
        )?;
        Ok(())
    };

    let mut trajectory_rows = String::from("episode,step,pose_col,pose_row,goal_col,goal_row,axis,forced\n");
    let final_snapshot = (env.episodes - 1, env.horizon - 1);
    for e in 0..env.episodes {
        let goal_index = if ckpt.mode.uses_goal_net() {
            let (goal_input, _) = state.planner_inputs();
            let input = graph.constant(goal_input);
            let probs = goal_forward(&nets.goal_arch, &mut graph, input, &nets.goal_ids)?;
            sample_goal(&mut graph, probs, &mut rng)?.0
        } else {
            iid_goal(env.n * env.n, &mut rng)
        };
        let goal = state.set_goal(goal_index)?;
        for t in 0..env.horizon {
            if requested.contains(&(e, t)) && (e, t) != final_snapshot {
                render(&state, e, t, &config.out_dir)?;
            }
            let rule = state.action_rule()?;
            let pose = state.pose();
            let axis = if ckpt.mode.uses_action_net() && !rule.is_forced() {
                let (_, action_input) = state.planner_inputs();
                let input = graph.constant(action_input);
                let probs = action_forward(&nets.action_arch, &mut graph, input, &nets.action_ids)?;
                sample_action(&mut graph, probs, rule, &mut rng)?.axis
            } else {
                iid_action(rule, &mut rng)
            };
            trajectory_rows.push_str(&format!(
                "{e},{t},{},{},{},{},{},{}\n",
                pose.0,
                pose.1,
                goal.col,
                goal.row,
                axis.label(),
                rule.is_forced()
            ));
            state.step(axis)?;
        }
    }
    if requested.contains(&final_snapshot) {
        render(&state, final_snapshot.0, final_snapshot.1, &config.out_dir)?;
    }

    let input = graph.constant(state.classifier_input());
    let probs = nets
        .classifier_arch
        .forward(&mut graph, input, &nets.classifier_ids)?;
    let mut bar = String::from("class,probability\n");
    for (class, p) in graph.value(probs).data().iter().enumerate() {
        bar.push_str(&format!("{class},{p}\n"));
    }
    std::fs::write(config.out_dir.join("prediction.csv"), bar)?;
    std::fs::write(config.out_dir.join("trajectory.csv"), trajectory_rows)?;
    println!(
        "rollout of test image {image_index} (label {label}) written to {}",
        config.out_dir.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(coords: usize, seed: u64) -> Result<()> {
    let outcomes = gradcheck::run_suite(coords, seed)?;
    let mut failed = false;
    for outcome in &outcomes {
        let verdict = if outcome.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<20} coords {:>4}  max rel err {:.3e} (tol {:.0e})",
            outcome.name,
            outcome.coords,
            outcome.max_rel_err,
            gradcheck::FD_TOL
        );
        failed |= !outcome.passed();
    }
    if failed {
        return Err(Error::Verification(
            "finite-difference suite reported failures".into(),
        ));
    }
    println!("all {} op checks passed", outcomes.len());
    Ok(())
}

pub fn cmd_oracle(config: &RunConfig, instances: usize, cap: usize) -> Result<()> {
    let env = config.env;
    let net = config.net;
    let mut worst_unbiased: f64 = 0.0;
    let mut worst_ablation: f64 = 0.0;
    for instance in 0..instances {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
            config.train.seed,
            &[0x0a9c1e, instance as u64],
        ));
        let image_data = (0..env.c * env.n * env.n)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let image = Tensor::new(vec![env.c, env.n, env.n], image_data)?;
        let label = Tensor::one_hot(net.classes, rng.gen_range(0..net.classes))?;
        let max = env.pose_max();
        let pose = (rng.gen_range(0..=max), rng.gen_range(0..=max));
        let params = PolicyParams::init(&env, &net, &mut rng)?;

        let full = enumerate_grad_check(
            &OracleInstance {
                image: &image,
                label: &label,
                start_pose: pose,
                params: &params,
                env: &env,
                net: &net,
                mode: Mode::FullPlanning,
            },
            cap,
        )?;
        let frozen = enumerate_grad_check(
            &OracleInstance {
                image: &image,
                label: &label,
                start_pose: pose,
                params: &params,
                env: &env,
                net: &net,
                mode: Mode::ClassifierOnly,
            },
            cap,
        )?;
        println!(
            "instance {instance}: {} trajectories, |E[grad est] - grad J| = {:.3e}, \
             frozen-uniform collapse gap = {:.3e}",
            full.trajectories, full.max_abs_diff, frozen.estimator_vs_reward_only
        );
        worst_unbiased = worst_unbiased.max(full.max_abs_diff);
        worst_ablation = worst_ablation.max(frozen.estimator_vs_reward_only);
    }
    println!("worst unbiasedness gap: {worst_unbiased:.3e} (tolerance 1e-9)");
    println!("worst frozen-uniform gap: {worst_ablation:.3e} (tolerance 1e-9)");
    if worst_unbiased >= 1e-9 || worst_ablation >= 1e-9 {
        return Err(Error::Verification(
            "enumeration oracle exceeded the 1e-9 tolerance".into(),
        ));
    }
    Ok(())
}

/// Default tiny geometry for the oracle command: the smallest instance with
/// both forced and free branches.
pub fn oracle_default_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.env = EnvConfig {
        n: 4,
        c: 1,
        m: 2,
        step: 2,
        episodes: 1,
        horizon: 1,
    };
    config.net = NetworkConfig {
        kernel: 3,
        planner_width: 2,
        planner_blocks: 1,
        classifier_base: 2,
        classifier_blocks: 1,
        classes: 3,
    };
    config
}
