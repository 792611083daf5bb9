use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pmx::persist;

fn pmx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmx"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn pmx")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

const TINY: &[&str] = &["--widths", "4,8,8", "--dim", "8", "--decoder-blocks", "1", "--batch-size", "4", "--log-every", "0"];

fn tiny_data(dir: &Path) {
    ok(pmx(dir, &["generate", "--seed", "3", "--count", "8", "--size", "16", "--out", "tiny.pmxd"]));
}

fn train_tiny(dir: &Path, task: &str, k: &str, steps: &str, out: &str) -> Output {
    let mut a = vec!["train", "--task", task, "--data", "tiny.pmxd", "--k", k, "--steps", steps, "--out", out];
    a.extend_from_slice(TINY);
    pmx(dir, &a)
}

#[test]
fn generate_writes_deterministic_dataset_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(pmx(d.path(), &["generate", "--count", "4", "--size", "16", "--out", "a/x.pmxd"]));
    ok(pmx(d.path(), &["generate", "--count", "4", "--size", "16", "--out", "a/y.pmxd"]));
    let x = fs::read(d.path().join("a/x.pmxd")).unwrap();
    assert_eq!(x, fs::read(d.path().join("a/y.pmxd")).unwrap());
    let (h, s) = persist::read_dataset(d.path().join("a/x.pmxd")).unwrap();
    assert_eq!((h.count, s.len()), (4, 4));
    let m = persist::read_manifest(&d.path().join("a/x.pmxd")).unwrap();
    assert_eq!(m.count, 4);

    assert_eq!(code(&pmx(d.path(), &["generate", "--count", "0"])), 2);
    assert_eq!(code(&pmx(d.path(), &["generate", "--size", "12", "--count", "1"])), 2);
    assert_eq!(code(&pmx(d.path(), &["generate", "--bogus"])), 2);
    assert_eq!(code(&pmx(d.path(), &[])), 2);
    assert_eq!(code(&pmx(d.path(), &["--help"])), 0);
}

#[test]
fn train_eval_predict_roundtrip() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    tiny_data(dir);
    ok(train_tiny(dir, "depth", "16", "200", "depth.pmxc"));
    for f in ["depth.pmxc", "depth.pmxc.loss.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.join("depth.pmxc.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);

    let o = ok(pmx(dir, &["eval", "--task", "depth", "--data", "tiny.pmxd", "--ckpt", "depth.pmxc"]));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let keys: Vec<&str> = v["metrics"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["abs_rel", "delta1", "delta2", "delta3", "log10", "rms"]);

    // Wrong task or K for the checkpoint: runtime error.
    assert_eq!(code(&pmx(dir, &["eval", "--task", "normal", "--data", "tiny.pmxd", "--ckpt", "depth.pmxc"])), 1);
    assert_eq!(code(&pmx(dir, &["eval", "--task", "depth", "--data", "tiny.pmxd", "--ckpt", "depth.pmxc", "--k", "4"])), 1);

    let mut bytes = fs::read(dir.join("depth.pmxc")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(dir.join("bad.pmxc"), &bytes).unwrap();
    let o = pmx(dir, &["eval", "--task", "depth", "--data", "tiny.pmxd", "--ckpt", "bad.pmxc"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt"));

    let o = ok(pmx(dir, &["predict", "--ckpt", "depth.pmxc", "--data", "tiny.pmxd", "--index", "2", "--out", "pred"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pred_depth.pgm"));
    let img = persist::read_netpbm(&dir.join("pred/pred_depth.pgm")).unwrap();
    assert_eq!((img.width, img.height, img.maxval), (16, 16, 255));
    assert_eq!(code(&pmx(dir, &["predict", "--ckpt", "depth.pmxc", "--data", "tiny.pmxd", "--index", "8"])), 2);
}

#[test]
fn eval_oracle_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    tiny_data(d.path());
    for (task, key, want) in [("seg", "miou", 1.0), ("depth", "delta1", 1.0), ("normal", "within_11.5", 1.0)] {
        let o = ok(pmx(d.path(), &["eval", "--oracle", "--task", task, "--data", "tiny.pmxd"]));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["metrics"][key].as_f64().unwrap(), want, "{task}");
    }
}

#[test]
fn seg_requires_k_equal_to_classes_and_data_must_exist() {
    let d = tempfile::tempdir().unwrap();
    tiny_data(d.path());
    let o = train_tiny(d.path(), "seg", "7", "1", "seg.pmxc");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("K = C"));
    assert_eq!(code(&pmx(d.path(), &["train", "--steps", "1"])), 2);
    assert_eq!(code(&pmx(d.path(), &["train", "--data", "nope.pmxd"])), 2);
}

#[test]
fn probmaps_are_complementary_panels() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    tiny_data(dir);
    ok(train_tiny(dir, "depth", "4", "20", "k4.pmxc"));
    let o = ok(pmx(dir, &["dump-probmaps", "--ckpt", "k4.pmxc", "--data", "tiny.pmxd", "--out", "maps"]));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
    let panels: Vec<_> = (0..4)
        .map(|c| persist::read_netpbm(&dir.join(format!("maps/probmap_depth_{c}.pgm"))).unwrap())
        .collect();
    for i in 0..256 {
        let s: i32 = panels.iter().map(|p| p.data[i] as i32).sum();
        assert!((s - 255).abs() <= 2, "pixel {i} sums to {s}");
    }
    assert_eq!(code(&pmx(dir, &["dump-probmaps", "--ckpt", "k4.pmxc", "--data", "tiny.pmxd", "--index", "99"])), 2);
}

#[test]
fn normal_images_use_the_affine_byte_map() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    tiny_data(dir);
    ok(train_tiny(dir, "normal", "4", "2", "n.pmxc"));
    ok(pmx(dir, &["predict", "--ckpt", "n.pmxc", "--data", "tiny.pmxd", "--out", "p"]));
    let gt = persist::read_netpbm(&dir.join("p/gt_normal.ppm")).unwrap();
    let (_, samples) = persist::read_dataset(dir.join("tiny.pmxd")).unwrap();
    let s = &samples[0];
    let mut seen = 0;
    for (px, n) in gt.data.chunks(3).zip(s.normal.chunks(3)) {
        if n == [0.0, 0.0, -1.0] {
            assert_eq!(px, [128, 128, 0]);
            seen += 1;
        }
    }
    assert!(seen > 0, "sample 0 shows no back wall");
    let pred = persist::read_netpbm(&dir.join("p/pred_normal.ppm")).unwrap();
    assert_eq!((pred.magic.as_str(), pred.data.len()), ("P6", 16 * 16 * 3));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    tiny_data(dir);
    ok(train_tiny(dir, "seg", "4", "6", "a.pmxc"));
    ok(train_tiny(dir, "seg", "4", "6", "b.pmxc"));
    assert_eq!(fs::read(dir.join("a.pmxc")).unwrap(), fs::read(dir.join("b.pmxc")).unwrap());

    ok(train_tiny(dir, "seg", "4", "3", "half.pmxc"));
    // Model and schedule come from the checkpoint; only the step budget is read from flags.
    ok(pmx(dir, &["train", "--task", "seg", "--data", "tiny.pmxd", "--steps", "6", "--resume", "half.pmxc", "--out", "c.pmxc"]));
    let full = persist::read_checkpoint(dir.join("a.pmxc")).unwrap();
    let resumed = persist::read_checkpoint(dir.join("c.pmxc")).unwrap();
    let params = |e: &[(String, pmx::tensor::Tensor<f32>)]| -> Vec<(String, pmx::tensor::Tensor<f32>)> {
        e.iter().filter(|(n, _)| !n.starts_with("meta/")).cloned().collect()
    };
    assert_eq!(params(&full), params(&resumed));
}
