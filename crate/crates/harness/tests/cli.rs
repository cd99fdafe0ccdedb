//! Exit codes and artifacts of the `stillguard` binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use stillguard_core::checkpoint::{load_checkpoint, save_checkpoint};
use stillguard_core::image_io::{load_image, save_image};
use stillguard_core::Tensor;
use stillguard_harness::OUTPUT_ENV;

fn stillguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stillguard")).args(args).env_remove(OUTPUT_ENV).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny models once under `out` and returns the config path.
fn trained(dir: &Path) -> String {
    let out = dir.join("out");
    let cfg = common::write_tiny_config(dir, &out);
    let cfg = path_str(&cfg).to_string();
    let r = stillguard(&["train", "--config", &cfg]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    cfg
}

fn gray_image(path: &Path) {
    save_image(&Tensor::full(&[3, 16, 16], 0.5), path).unwrap();
}

#[test]
fn missing_subcommand_is_usage_error() {
    assert_eq!(code(&stillguard(&[])), 2);
    assert_eq!(code(&stillguard(&["table", "--bogus"])), 2);
    assert_eq!(code(&stillguard(&["immunize", "--image", "x.ppm", "--out", "y.ppm", "--loss", "lpips"])), 2);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[attack]\niteration = 10\n").unwrap();
    let r = stillguard(&["table", "--config", path_str(&cfg)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("iteration"), "{}", stderr(&r));

    let r = stillguard(&["table", "--config", path_str(&dir.path().join("absent.toml"))]);
    assert_eq!(code(&r), 2);
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny_config(dir.path(), &dir.path().join("out"));
    for sub in ["table", "ablate", "sweep"] {
        let r = stillguard(&[sub, "--config", path_str(&cfg)]);
        assert_eq!(code(&r), 3, "{sub}: {}", stderr(&r));
        assert!(stderr(&r).contains("stillguard train"));
    }
}

#[test]
fn subcommands_run_on_trained_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let ckpt = dir.path().join("out/checkpoints");
    for f in ["vae.ckpt", "dit.ckpt", "vae_loss.csv", "dit_loss.csv"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }

    let clean = dir.path().join("clean");
    let adv = dir.path().join("adv");
    std::fs::create_dir_all(&clean).unwrap();
    std::fs::create_dir_all(&adv).unwrap();
    gray_image(&clean.join("a.ppm"));

    let frames = dir.path().join("frames");
    let r = stillguard(&[
        "generate",
        "--config",
        &cfg,
        "--image",
        path_str(&clean.join("a.ppm")),
        "--caption",
        "red disc moving east",
        "--out",
        path_str(&frames),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for t in 0..4 {
        assert!(frames.join(format!("frame_{t:02}.ppm")).is_file());
    }

    let r = stillguard(&[
        "immunize",
        "--config",
        &cfg,
        "--image",
        path_str(&clean.join("a.ppm")),
        "--loss",
        "attn-cross",
        "--eps",
        "8",
        "--iters",
        "3",
        "--out",
        path_str(&adv.join("a.ppm")),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let x = load_image(&clean.join("a.ppm")).unwrap();
    let x_adv = load_image(&adv.join("a.ppm")).unwrap();
    assert!(x.data().iter().zip(x_adv.data()).all(|(a, b)| (a - b).abs() <= 8.0 / 255.0 + 1e-12));
    assert!(x != x_adv);

    let r = stillguard(&["evaluate", "--config", &cfg, "--clean", path_str(&clean), "--adv", path_str(&adv)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let csv = std::fs::read_to_string(dir.path().join("out/tiny/evaluate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let r = stillguard(&["sweep", "--config", &cfg, "--eps", "4,2"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(dir.path().join("out/tiny/sweep_flow.svg").is_file());

    let r = stillguard(&["ablate", "--config", &cfg]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for stem in ["ablation_caption", "ablation_attention"] {
        assert!(dir.path().join(format!("out/tiny/{stem}.json")).is_file());
    }
}

#[test]
fn binary_image_format_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let p5 = dir.path().join("gray.pgm");
    std::fs::write(&p5, b"P5\n2 2\n255\n\x00\x01\x02\x03").unwrap();
    let r = stillguard(&["generate", "--config", &cfg, "--image", path_str(&p5), "--out", path_str(&dir.path().join("f"))]);
    assert_eq!(code(&r), 4, "{}", stderr(&r));
}

#[test]
fn non_finite_loss_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let path = dir.path().join("out/checkpoints/vae.ckpt");
    let mut named: Vec<(String, Tensor)> = load_checkpoint(&path).unwrap().into_iter().collect();
    for (name, t) in named.iter_mut() {
        if name == "vae.enc2.bias" {
            t.data_mut()[0] = f64::INFINITY;
        }
    }
    save_checkpoint(&named, &path).unwrap();
    let img = dir.path().join("a.ppm");
    gray_image(&img);
    let r = stillguard(&[
        "immunize",
        "--config",
        &cfg,
        "--image",
        path_str(&img),
        "--iters",
        "2",
        "--out",
        path_str(&dir.path().join("b.ppm")),
    ]);
    assert_eq!(code(&r), 5, "{}", stderr(&r));
}

#[test]
fn output_root_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny_config(dir.path(), &dir.path().join("configured"));
    let env_out = dir.path().join("from_env");
    let r = Command::new(env!("CARGO_BIN_EXE_stillguard"))
        .args(["train", "--config", path_str(&cfg)])
        .env(OUTPUT_ENV, &env_out)
        .output()
        .unwrap();
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(env_out.join("checkpoints/dit.ckpt").is_file());
    assert!(!dir.path().join("configured").exists());
}

#[test]
fn train_seed_flag_changes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (i, seed) in ["1", "1", "2"].iter().enumerate() {
        let sub = dir.path().join(i.to_string());
        std::fs::create_dir_all(&sub).unwrap();
        let cfg = common::write_tiny_config(&sub, &sub.join("out"));
        let r = stillguard(&["train", "--config", path_str(&cfg), "--seed", seed]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        bytes.push(std::fs::read(sub.join("out/checkpoints/dit.ckpt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0], bytes[2]);
}
