use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prior_bridge::geometry::{io, synth};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prior-bridge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn cloud_dir(dir: &Path, count: usize, n: usize, seed: u64) -> PathBuf {
    let d = dir.join(format!("clouds_{seed}"));
    std::fs::create_dir_all(&d).unwrap();
    for (i, set) in synth::sphere_dataset(count, n, 1.0, seed).unwrap().iter().enumerate() {
        io::write_cloud_rows(&d.join(format!("c{i:02}.txt")), set).unwrap();
    }
    d
}

fn water_file(dir: &Path) -> PathBuf {
    let p = dir.join("water.xyz");
    let mut text = String::new();
    for i in 0..6 {
        let e = 0.01 * i as f64;
        text += &format!(
            "3\nframe {i}\nO 0.0 0.0 {e}\nH {} 0.0 0.0\nH -0.24 {} 0.0\n",
            0.96 + e,
            0.93 - e
        );
    }
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn point_cloud_pipeline_reruns_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = cloud_dir(dir, 6, 16, 100);
    let reference = cloud_dir(dir, 4, 16, 200);

    let stats = dir.join("a/stats.json");
    ok(&["extract-stats", "--data", s(&data), "--out", s(&stats)]);
    let stats_cfg = dir.join("a/stats.resolved.cfg");
    let stats2 = dir.join("b/stats.json");
    ok(&["extract-stats", "--config", s(&stats_cfg), "--out", s(&stats2)]);
    assert_eq!(read(stats.clone()), read(stats2));

    let train_a = dir.join("train_a");
    ok(&[
        "train", "--data", s(&data), "--out-dir", s(&train_a), "--energy", "knn", "--epochs", "3",
        "--set", "hidden=8", "--set", "steps=20", "--set", "batch_size=4", "--set", "optimizer=adam",
        "--set", "learning_rate=0.001",
    ]);
    let train_b = dir.join("train_b");
    ok(&["train", "--config", s(&train_a.join("resolved.cfg")), "--out-dir", s(&train_b)]);
    for f in ["model.ckpt", "train_log.csv", "stats.json"] {
        assert_eq!(read(train_a.join(f)), read(train_b.join(f)), "{f} differs");
    }
    let cfg = String::from_utf8(read(train_a.join("resolved.cfg"))).unwrap();
    assert!(cfg.contains("bridge = forced"));
    assert!(cfg.lines().any(|l| l.starts_with("seed = ") && l.len() > "seed = ".len()));

    let samp_a = dir.join("samp_a");
    ok(&[
        "sample", "--checkpoint", s(&train_a.join("model.ckpt")), "--out-dir", s(&samp_a), "--n", "5",
        "--steps", "20", "--set", "trajectories=true",
    ]);
    let samp_b = dir.join("samp_b");
    ok(&["sample", "--config", s(&samp_a.join("resolved.cfg")), "--out-dir", s(&samp_b)]);
    for f in ["sample_0000.txt", "sample_0004.txt", "trajectories/traj_0002.xyz", "batch.json"] {
        assert_eq!(read(samp_a.join(f)), read(samp_b.join(f)), "{f} differs");
    }
    let first = io::read_point_set(&samp_a.join("sample_0000.txt"), None).unwrap();
    assert_eq!(first.len(), 16);

    let eval_a = dir.join("eval_a");
    let out = ok(&[
        "eval", "--samples", s(&samp_a), "--reference", s(&reference), "--out-dir", s(&eval_a),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("MMD-CD"));
    let eval_b = dir.join("eval_b");
    ok(&["eval", "--config", s(&eval_a.join("resolved.cfg")), "--out-dir", s(&eval_b)]);
    assert_eq!(read(eval_a.join("report.json")), read(eval_b.join("report.json")));
    let report: serde_json::Value = serde_json::from_slice(&read(eval_a.join("report.json"))).unwrap();
    assert_eq!(report["n_generated"], 5);
    assert_eq!(report["n_reference"], 4);
}

#[test]
fn verify_reports_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("va");
    ok(&[
        "verify", "--out-dir", s(&a), "--seed", "3", "--set", "bridge=forced", "--set", "points=16",
        "--set", "paths=100", "--set", "steps_list=20,80",
    ]);
    let b = tmp.path().join("vb");
    ok(&["verify", "--config", s(&a.join("resolved.cfg")), "--out-dir", s(&b)]);
    assert_eq!(read(a.join("verify.json")), read(b.join("verify.json")));
    let report: serde_json::Value = serde_json::from_slice(&read(a.join("verify.json"))).unwrap();
    assert_eq!(report["gronwall"]["pass"], true);

    let c = tmp.path().join("vc");
    ok(&["verify", "--out-dir", s(&c), "--seed", "3", "--set", "gronwall_alpha=constant:1", "--set", "paths=100", "--set", "points=8", "--set", "steps_list=10"]);
    let report: serde_json::Value = serde_json::from_slice(&read(c.join("verify.json"))).unwrap();
    assert_eq!(report["gronwall"]["pass"], false);
}

#[test]
fn molecule_training_and_energy_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let water = water_file(dir);

    let out = ok(&["energy", "--input", s(&water), "--energy", "amber", "--set", "fd_step=1e-5"]);
    let dump: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(dump["gradient"].as_array().unwrap().len(), 3);
    assert!(dump["fd_relative_error"].as_f64().unwrap() < 1e-5);

    let e_out = dir.join("e/energy.json");
    ok(&["energy", "--input", s(&water), "--energy", "riesz", "--out", s(&e_out)]);
    let e_rerun = dir.join("e2/energy.json");
    ok(&["energy", "--config", s(&dir.join("e/energy.resolved.cfg")), "--out", s(&e_rerun)]);
    assert_eq!(read(e_out), read(e_rerun));

    let t = dir.join("mol");
    ok(&[
        "train", "--data", s(&water), "--out-dir", s(&t), "--energy", "amber", "--epochs", "2", "--seed", "1",
        "--set", "hidden=8", "--set", "steps=10", "--set", "batch_size=3",
    ]);
    let cfg = String::from_utf8(read(t.join("resolved.cfg"))).unwrap();
    assert!(cfg.contains("symbols = H,O"));
    assert!(cfg.contains("alpha_mode = scheduled"));
    let samples = dir.join("mol_samples");
    ok(&[
        "sample", "--checkpoint", s(&t.join("model.ckpt")), "--out-dir", s(&samples), "--n", "3", "--seed", "2",
        "--steps", "10",
    ]);
    let text = String::from_utf8(read(samples.join("sample_0001.xyz"))).unwrap();
    assert!(text.starts_with("3\n"));
    assert!(text.lines().skip(2).all(|l| l.starts_with("H ") || l.starts_with("O ")));

    let ev = dir.join("mol_eval");
    ok(&["eval", "--samples", s(&samples), "--reference", s(&water), "--out-dir", s(&ev)]);
    let report: serde_json::Value = serde_json::from_slice(&read(ev.join("report.json"))).unwrap();
    assert!(report["atom_stability"].is_number());
    assert!(report["uniqueness"].is_number());
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--set", "unknown=1"]).status.code(), Some(2));
    let missing = dir.join("none");
    assert_eq!(run(&["extract-stats", "--data", s(&missing)]).status.code(), Some(3));

    let bad = dir.join("bad.ckpt");
    let mut bytes = b"PBRIDGE\0".to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&[7u8; 64]);
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&["sample", "--checkpoint", s(&bad), "--out-dir", s(&dir.join("o")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    let bad_row = dir.join("bad.txt");
    std::fs::write(&bad_row, "0 0 0\n1 2\n").unwrap();
    let out = run(&["energy", "--input", s(&bad_row)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2"));
}
