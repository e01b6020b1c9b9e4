//! End-to-end tests of the command-line interface: generate a synthetic
//! sequence, train a small checkpoint, predict depth, run the pipeline and
//! evaluate it, all through the binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn capslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capslam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed.\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_scene_config(path: &Path, frames: usize) {
    let config = serde_json::json!({
        "scene": { "kind": "fronto-plane", "depth": 2.0 },
        "width": 16,
        "height": 16,
        "intrinsics": { "fx": 16.0, "fy": 16.0, "cx": 7.5, "cy": 7.5, "baseline": 0.45 },
        "trajectory": { "kind": "lateral-sweep", "amplitude": 0.08, "forward": 0.01, "frames": frames },
        "texture_seed": 3,
        "texture_freq": [1.5, 5.0],
        "fps": 10.0
    });
    fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

fn write_train_config(path: &Path, epochs: usize) {
    let config = serde_json::json!({
        "network": {
            "input_width": 16,
            "input_height": 16,
            "encoder_channels": 8,
            "capsules": {
                "num_capsules_in": 8,
                "dim_in": 8,
                "num_capsules_out": 16,
                "dim_out": 8,
                "routing_iterations": 3
            },
            "decoder_channels": [16, 8],
            "d_max": 4.8
        },
        "weights": { "alpha_ap": 1.0, "alpha_ds": 0.1, "alpha_lr": 1.0, "zeta_coef": 1e-4 },
        "lr": 0.01,
        "epochs": epochs,
        "seed": 7
    });
    fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    let seq_dir = root.join("seq");
    let scene = root.join("scene.json");
    let train_cfg = root.join("train.json");
    let ckpt = root.join("model.json");
    let slam_out = root.join("slam");

    write_scene_config(&scene, 6);
    let out = capslam(&[
        "synth",
        "--config",
        scene.to_str().unwrap(),
        "--out",
        seq_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "synth");
    assert!(seq_dir.join("times.txt").exists());
    assert!(seq_dir.join("intrinsics.json").exists());
    assert!(seq_dir.join("groundtruth.txt").exists());
    assert!(seq_dir.join("images/00000.png").exists());
    assert!(seq_dir.join("right/00000.png").exists());
    assert!(seq_dir.join("depth/00000.png").exists());

    write_train_config(&train_cfg, 10);
    let out = capslam(&[
        "train",
        "--data",
        seq_dir.to_str().unwrap(),
        "--config",
        train_cfg.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_success(&out, "train");
    assert!(ckpt.exists());
    let history = ckpt.with_extension("history.csv");
    let history_text = fs::read_to_string(&history).unwrap();
    assert!(history_text.starts_with("step,loss,l_ap,l_ds,l_lr,zeta"));
    assert_eq!(history_text.lines().count(), 11);

    let depth_png = root.join("depth.png");
    let preview = root.join("preview.png");
    let out = capslam(&[
        "predict-depth",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        seq_dir.join("images/00000.png").to_str().unwrap(),
        "--out",
        depth_png.to_str().unwrap(),
        "--preview",
        preview.to_str().unwrap(),
    ]);
    assert_success(&out, "predict-depth");
    assert!(depth_png.exists());
    assert!(preview.exists());

    let out = capslam(&[
        "run-slam",
        "--data",
        seq_dir.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        slam_out.to_str().unwrap(),
    ]);
    assert_success(&out, "run-slam");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(slam_out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 6);
    assert!(slam_out.join("trajectory.txt").exists());
    assert!(slam_out.join("trajectory_raw.txt").exists());
    let ply = fs::read_to_string(slam_out.join("map.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));

    let out = capslam(&[
        "eval",
        "--pred",
        slam_out.to_str().unwrap(),
        "--gt",
        seq_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "eval");
    let eval: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!(eval["ate_rmse"].is_number());

    // Determinism: a second identical run produces a byte-identical report.
    let slam_out2 = root.join("slam2");
    let out = capslam(&[
        "run-slam",
        "--data",
        seq_dir.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        slam_out2.to_str().unwrap(),
    ]);
    assert_success(&out, "run-slam again");
    assert_eq!(
        fs::read(slam_out.join("report.json")).unwrap(),
        fs::read(slam_out2.join("report.json")).unwrap()
    );
    assert_eq!(
        fs::read(slam_out.join("trajectory.txt")).unwrap(),
        fs::read(slam_out2.join("trajectory.txt")).unwrap()
    );
}

#[test]
fn flow_and_keypoints_commands() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    let seq_dir = root.join("seq");
    let scene = root.join("scene.json");
    write_scene_config(&scene, 3);
    // Bigger, textured frames track better; regenerate at 48x48.
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&scene).unwrap()).unwrap();
    config["width"] = 48.into();
    config["height"] = 48.into();
    config["intrinsics"]["fx"] = 48.0.into();
    config["intrinsics"]["fy"] = 48.0.into();
    config["intrinsics"]["cx"] = 23.5.into();
    config["intrinsics"]["cy"] = 23.5.into();
    config["texture_freq"] = serde_json::json!([3.0, 9.0]);
    fs::write(&scene, serde_json::to_string(&config).unwrap()).unwrap();

    let out = capslam(&[
        "synth",
        "--config",
        scene.to_str().unwrap(),
        "--seed",
        "11",
        "--out",
        seq_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "synth");

    let kp_csv = root.join("kp.csv");
    let out = capslam(&[
        "keypoints",
        "--input",
        seq_dir.join("images/00000.png").to_str().unwrap(),
        "--out",
        kp_csv.to_str().unwrap(),
    ]);
    assert_success(&out, "keypoints");
    let text = fs::read_to_string(&kp_csv).unwrap();
    assert!(text.starts_with("u,v,score\n"));
    assert!(text.lines().count() > 1, "no keypoints detected");

    let flow_csv = root.join("flow.csv");
    let out = capslam(&[
        "flow",
        "--prev",
        seq_dir.join("images/00000.png").to_str().unwrap(),
        "--next",
        seq_dir.join("images/00001.png").to_str().unwrap(),
        "--out",
        flow_csv.to_str().unwrap(),
    ]);
    assert_success(&out, "flow");
    let text = fs::read_to_string(&flow_csv).unwrap();
    assert!(text.starts_with("u,v,du,dv,valid\n"));
}

#[test]
fn validation_errors_exit_with_code_1() {
    let dir = tempdir().unwrap();
    // Missing sequence directory.
    let out = capslam(&[
        "run-slam",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--ckpt",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Malformed scene config.
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = capslam(&[
        "synth",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
