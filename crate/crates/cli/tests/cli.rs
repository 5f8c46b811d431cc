//! End-to-end checks of the `glimpse` binary: exit codes, file outputs,
//! and resume determinism, all on a tiny synthetic IDX dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_glimpse")
}

fn run(args: &[&str], data_dir: &Path, out_dir: &Path) -> Output {
    Command::new(binary())
        .args(args)
        .env("GLIMPSE_DATA_DIR", data_dir)
        .args(["--out", out_dir.to_str().unwrap()])
        .output()
        .expect("binary runs")
}

/// Writes a deterministic two-class 8x8 IDX dataset (bright top-left vs
/// bright bottom-right quadrant) into `dir`.
fn write_tiny_idx(dir: &Path, train_count: usize, test_count: usize) {
    let write_pair = |images_name: &str, labels_name: &str, count: usize, salt: u8| {
        let mut images = Vec::new();
        images.extend_from_slice(&2051u32.to_be_bytes());
        images.extend_from_slice(&(count as u32).to_be_bytes());
        images.extend_from_slice(&8u32.to_be_bytes());
        images.extend_from_slice(&8u32.to_be_bytes());
        let mut labels = Vec::new();
        labels.extend_from_slice(&2049u32.to_be_bytes());
        labels.extend_from_slice(&(count as u32).to_be_bytes());
        for k in 0..count {
            let class = (k % 2) as u8;
            labels.push(class);
            for y in 0..8u8 {
                for x in 0..8u8 {
                    let lit = if class == 0 {
                        y < 4 && x < 4
                    } else {
                        y >= 4 && x >= 4
                    };
                    let noise = ((k as u8).wrapping_mul(13).wrapping_add(salt)) % 32;
                    images.push(if lit { 220 + noise % 35 } else { noise });
                }
            }
        }
        std::fs::write(dir.join(images_name), images).unwrap();
        std::fs::write(dir.join(labels_name), labels).unwrap();
    };
    write_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_count, 3);
    write_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test_count, 7);
}

fn tiny_config_args() -> Vec<&'static str> {
    vec![
        "--set",
        "env.n=8",
        "--set",
        "env.m=3",
        "--set",
        "env.episodes=1",
        "--set",
        "env.horizon=2",
        "--set",
        "net.planner_width=2",
        "--set",
        "net.planner_blocks=1",
        "--set",
        "net.classifier_base=2",
        "--set",
        "net.classifier_blocks=1",
        "--set",
        "net.classes=2",
        "--set",
        "train.batch_size=4",
        "--set",
        "train.rollouts=2",
        "--workers",
        "1",
    ]
}

struct Dirs {
    _root: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn dirs() -> Dirs {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let out = root.path().join("out");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::create_dir_all(&out).unwrap();
    write_tiny_idx(&data, 16, 8);
    Dirs {
        data,
        out,
        _root: root,
    }
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let d = dirs();
    let out = run(&["gradcheck", "--coords", "30"], &d.data, &d.out);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn oracle_passes_and_exits_zero() {
    let d = dirs();
    let out = run(&["oracle", "--instances", "2"], &d.data, &d.out);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("worst unbiasedness gap"));
}

#[test]
fn oracle_refuses_oversized_spaces_with_exit_one() {
    let d = dirs();
    let out = run(&["oracle", "--instances", "1", "--cap", "3"], &d.data, &d.out);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cap"));
}

#[test]
fn invalid_configs_exit_one() {
    let d = dirs();
    let mut args = vec!["train"];
    args.extend(["--set", "train.schedule=[[\"ii\",1],[\"i\",1]]"]);
    let out = run(&args, &d.data, &d.out);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regresses"));

    let out = run(&["train", "--set", "env.unknown_field=3"], &d.data, &d.out);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["train", "--set", "env.m=99"], &d.data, &d.out);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_three() {
    let d = dirs();
    let empty = d.out.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let mut args = tiny_config_args();
    args.insert(0, "train");
    args.extend(["--set", "train.schedule=[[\"i\",1]]"]);
    let out = Command::new(binary())
        .args(&args)
        .env("GLIMPSE_DATA_DIR", &empty)
        .args(["--out", d.out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_eval_rollout_pipeline_works() {
    let d = dirs();
    let mut args = tiny_config_args();
    args.insert(0, "train");
    args.extend(["--set", "train.schedule=[[\"i\",2]]", "--seed", "3"]);
    let out = run(&args, &d.data, &d.out);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = std::fs::read_to_string(d.out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,mode,train_loss,train_acc,test_acc,wall_seconds"));
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    let ckpt = d.out.join("checkpoint_latest.ckpt");
    assert!(ckpt.exists());

    // Evaluation prints intervals and writes the confusion matrix.
    let mut args = tiny_config_args();
    args.insert(0, "eval");
    let ckpt_str = ckpt.to_str().unwrap().to_string();
    args.extend(["--checkpoint", &ckpt_str, "--runs", "3"]);
    let out = run(&args, &d.data, &d.out);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("top-1 accuracy"));
    let confusion = std::fs::read_to_string(d.out.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 2);

    // Isolated classifier on complete images.
    let mut args = tiny_config_args();
    args.insert(0, "eval-classifier");
    args.extend(["--checkpoint", &ckpt_str]);
    let out = run(&args, &d.data, &d.out);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("top-1 accuracy"));

    // Rollout renders PGM snapshots and CSVs.
    let mut args = tiny_config_args();
    args.insert(0, "rollout");
    args.extend(["--checkpoint", &ckpt_str, "--image-index", "1"]);
    let out = run(&args, &d.data, &d.out);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let marked = std::fs::read(d.out.join("snapshot_e0_t0.pgm")).unwrap();
    let raw = std::fs::read(d.out.join("snapshot_e0_t0_raw.pgm")).unwrap();
    assert!(marked.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(marked.len(), raw.len());
    assert_ne!(marked, raw, "markers must be burned into the marked variant only");
    assert!(d.out.join("snapshot_e0_t1.pgm").exists());
    assert!(d.out.join("prediction.csv").exists());
    let trajectory = std::fs::read_to_string(d.out.join("trajectory.csv")).unwrap();
    assert_eq!(trajectory.lines().count(), 1 + 2, "{trajectory}");

    // Snapshot coordinates outside the budget are usage errors.
    let mut args = tiny_config_args();
    args.insert(0, "rollout");
    args.extend(["--checkpoint", &ckpt_str, "--snapshots", "5,0"]);
    let out = run(&args, &d.data, &d.out);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resume_reproduces_the_same_metrics() {
    let d = dirs();
    let out_a = d.out.join("a");
    let out_b = d.out.join("b");
    std::fs::create_dir_all(&out_a).unwrap();
    std::fs::create_dir_all(&out_b).unwrap();

    // One shot: two epochs.
    let mut args = tiny_config_args();
    args.insert(0, "train");
    args.extend(["--set", "train.schedule=[[\"i\",2]]", "--seed", "11"]);
    let out = run(&args, &d.data, &out_a);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Split: one epoch, then resume for the second.
    let mut args = tiny_config_args();
    args.insert(0, "train");
    args.extend(["--set", "train.schedule=[[\"i\",1]]", "--seed", "11"]);
    let out = run(&args, &d.data, &out_b);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first_ckpt = out_b.join("checkpoint_latest.ckpt");
    let first_ckpt = first_ckpt.to_str().unwrap().to_string();
    let mut args = tiny_config_args();
    args.insert(0, "train");
    args.extend([
        "--set",
        "train.schedule=[[\"i\",2]]",
        "--seed",
        "11",
        "--resume",
        &first_ckpt,
    ]);
    let out = run(&args, &d.data, &out_b);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let read_rows = |path: &Path| -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .map(|line| {
                // Drop the wall-seconds column; it is not deterministic.
                let mut cells: Vec<&str> = line.split(',').collect();
                cells.pop();
                cells.join(",")
            })
            .collect()
    };
    let rows_a = read_rows(&out_a.join("metrics.csv"));
    let rows_b = read_rows(&out_b.join("metrics.csv"));
    assert_eq!(rows_a.len(), 2);
    assert_eq!(rows_b.len(), 2);
    assert_eq!(rows_a[1], rows_b[1], "resumed epoch must reproduce bit-for-bit");
}
