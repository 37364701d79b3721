//! End-to-end CLI checks: the documented flags, artifact layout and exit
//! codes of the `side` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_side"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn train_small(dir: &Path, algorithm: &str, env: &str, extra: &[&str]) {
    let mut cmd = bin();
    cmd.args([
        "train",
        "--algorithm",
        algorithm,
        "--env",
        env,
        "--seed",
        "3",
        "--timesteps",
        "400",
        "--out",
        dir.to_str().unwrap(),
        "--set",
        "batch_size=8",
        "--set",
        "buffer_capacity=64",
        "--set",
        "eval_interval=200",
        "--set",
        "eval_episodes=4",
    ]);
    cmd.args(extra);
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_writes_manifest_metrics_config_checkpoint() {
    let dir = tmp_dir("train");
    train_small(&dir, "side", "two_step", &[]);
    for artifact in [
        "manifest.txt",
        "metrics.csv",
        "config.resolved",
        "checkpoint_final.bin",
        "checkpoint_latest.bin",
    ] {
        assert!(dir.join(artifact).exists(), "missing {artifact}");
    }
    let manifest = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status = complete"));
    assert!(manifest.contains("seed = 3"));
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "timestep,episode,eval_return_mean,eval_return_median,td_loss,kl_prior,recon_prior,kl,recon,total_loss,epsilon"
    ));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_emits_one_summary_row_with_four_statistics() {
    let dir = tmp_dir("eval");
    train_small(&dir, "qmix_po", "two_step", &[]);
    let out = bin()
        .args(["eval", "--run", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.join("eval_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2, "exactly one header and one summary row");
    assert_eq!(lines[0], "return_mean,return_median,return_p25,return_p75");
    assert_eq!(lines[1].split(',').count(), 4);
    // episode recordings come along
    assert!(dir.join("eval_episodes.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn dump_latents_has_full_latent_width_and_true_state_file() {
    let dir = tmp_dir("latents");
    train_small(
        &dir,
        "side",
        "treasure_grid",
        &["--set", "dump_episodes=2", "--set", "grid_episode_limit=6"],
    );
    let out = bin()
        .args(["dump-latents", "--run", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "dump-latents failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let latents = std::fs::read_to_string(dir.join("latents.csv")).unwrap();
    let header: Vec<&str> = latents.lines().next().unwrap().split(',').collect();
    // episode, t, 3 agents x 64 latent dims, return_to_go
    assert_eq!(header.len(), 2 + 3 * 64 + 1);
    assert_eq!(header[2], "s_0");
    assert_eq!(*header.last().unwrap(), "return_to_go");
    let states = std::fs::read_to_string(dir.join("true_states.csv")).unwrap();
    let sheader: Vec<&str> = states.lines().next().unwrap().split(',').collect();
    assert_eq!(sheader.len(), 2 + 12); // 3 agents x 2 + 2 treasures x 3
    assert_eq!(
        latents.lines().count(),
        states.lines().count(),
        "latent and true-state dumps cover the same steps"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_config_and_missing_checkpoint_fail_with_nonzero_exit() {
    // constraint violation names the field
    let out = bin()
        .args([
            "train",
            "--algorithm",
            "qmix",
            "--env",
            "two_step",
            "--set",
            "gamma=1.5",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));

    // vdn cannot take an explicit non-none state source
    let out = bin()
        .args([
            "train",
            "--algorithm",
            "vdn",
            "--env",
            "two_step",
            "--set",
            "state_source=true_state",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("state_source"));

    // unknown key is rejected
    let out = bin()
        .args(["train", "--algorithm", "qmix", "--env", "two_step", "--set", "lr_typo=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_typo"));

    // eval without a checkpoint
    let dir = tmp_dir("nockpt");
    let out = bin()
        .args(["eval", "--run", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tmp_dir("cfgfile");
    let cfg_path = dir.join("run.conf");
    std::fs::write(
        &cfg_path,
        "algorithm = qmix_po\nenv = two_step\nseed = 5\ntotal_timesteps = 200\n\
         batch_size = 8\nbuffer_capacity = 32\neval_interval = 100\neval_episodes = 2\n",
    )
    .unwrap();
    let out_dir = dir.join("run");
    let out = bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--set",
            "seed=7",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let resolved = std::fs::read_to_string(out_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 7")); // override wins
    assert!(resolved.contains("algorithm = qmix_po"));
    std::fs::remove_dir_all(&dir).ok();
}
