use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn forgery(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forgery"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY: &str = "\
seed = 4
model.image_size = 16
model.num_scales = 2
model.base_channels = 4
model.bottleneck_channels = 8
model.mlp_hidden = 8
train.epochs = 2
data.image_size = 16
data.n_train = 8
data.n_val = 4
data.n_test = 4
data.families = splice, warp
";

#[test]
fn minimal_spec_writes_sixteen_images() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        &dir.path().join("spec.conf"),
        "data.n_train = 4\ndata.n_val = 2\ndata.n_test = 2\ndata.families = splice\n",
    );
    let out = dir.path().join("data");
    let payload = stdout_json(&forgery(&["generate", "--spec", &spec, "--out", out.to_str().unwrap()]));
    assert_eq!(payload["images"], 16);
    let count: usize = ["train", "val", "test"]
        .iter()
        .map(|s| fs::read_dir(out.join(s).join("images")).unwrap().count())
        .sum();
    assert_eq!(count, 16);
    assert!(out.join("spec.json").exists() && out.join("train/labels.csv").exists());

    // a second run refuses to overwrite
    let again = forgery(&["generate", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2));
    assert!(again.stdout.is_empty());
    let forced = forgery(&["generate", "--spec", &spec, "--out", out.to_str().unwrap(), "--force"]);
    assert!(forced.status.success());
}

#[test]
fn unknown_family_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(&dir.path().join("spec.conf"), "data.families = splice, morph\n");
    let out = forgery(&["generate", "--spec", &spec, "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.families") && err.contains("morph"), "{err}");
}

#[test]
fn missing_data_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = forgery(&[
        "train",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let conf = write(&root.join("run.conf"), TINY);
    let data = root.join("data");
    let data_s = data.to_str().unwrap();
    stdout_json(&forgery(&["generate", "--spec", &conf, "--out", data_s]));

    let run_a = root.join("a");
    let trained = stdout_json(&forgery(&["train", "--config", &conf, "--data", data_s, "--out", run_a.to_str().unwrap()]));
    assert_eq!(trained["arm"], "full");
    assert!(trained["tau"].is_number());
    for f in ["manifest.json", "params.bin", "train_log.jsonl", "run.conf"] {
        assert!(run_a.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_a.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(entry["loss"]["total"].is_number());
    }

    // same seed, same manifest
    let run_b = root.join("b");
    stdout_json(&forgery(&["train", "--config", &conf, "--data", data_s, "--out", run_b.to_str().unwrap()]));
    assert_eq!(
        fs::read_to_string(run_a.join("manifest.json")).unwrap(),
        fs::read_to_string(run_b.join("manifest.json")).unwrap()
    );

    let ckpt = run_a.to_str().unwrap();
    let report = stdout_json(&forgery(&["eval", "--checkpoint", ckpt, "--data", data_s, "--split", "train"]));
    for key in ["acc", "auc", "apcer", "bpcer", "n_real", "n_fake", "route_counts", "config_hash", "seed", "split", "family"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let rejected = report["route_counts"]["rejected"].as_u64().unwrap_or(0);
    assert!(rejected as f64 <= 0.05 * 24.0, "{rejected} rejected");
    assert_eq!(report["family"], "all");
    let warp = stdout_json(&forgery(&[
        "eval", "--checkpoint", ckpt, "--data", data_s, "--split", "test", "--family", "warp",
    ]));
    assert_eq!(warp["n_fake"], 4);
    assert_eq!(warp["n_real"], 4);
    assert_eq!(warp["family"], "warp");

    let image = data.join("test/images/real_00000.png");
    let out = forgery(&["predict", "--checkpoint", ckpt, "--image", image.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1);
    let pred = stdout_json(&out);
    assert!(pred["label"] == "real" || pred["label"] == "fake");
    for key in ["score", "route", "bias_statistic"] {
        assert!(pred.get(key).is_some());
    }

    // a saturated image has a bias statistic far above tau and is rejected
    let white = root.join("white.png");
    let mut img = image_bytes_white(16);
    fs::write(&white, &mut img).unwrap();
    let pred = stdout_json(&forgery(&["predict", "--checkpoint", ckpt, "--image", white.to_str().unwrap()]));
    let stat = pred["bias_statistic"].as_f64().unwrap();
    if stat > trained["tau"].as_f64().unwrap() {
        assert_eq!(pred["label"], "fake");
        assert_eq!(pred["route"], "rejected");
    }

    // wrong size
    let big = data.join("../big.png");
    fs::write(&big, image_bytes_white(20)).unwrap();
    let out = forgery(&["predict", "--checkpoint", ckpt, "--image", big.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // corrupt checkpoint
    let blob = run_a.join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&blob, bytes).unwrap();
    let out = forgery(&["eval", "--checkpoint", ckpt, "--data", data_s, "--split", "test"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn ablate_emits_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let conf = write(&root.join("run.conf"), &format!("{TINY}train.epochs = 1\n"));
    let data = root.join("data");
    stdout_json(&forgery(&["generate", "--spec", &conf, "--out", data.to_str().unwrap()]));
    let out = root.join("ablation");
    let summary = stdout_json(&forgery(&[
        "ablate",
        "--config",
        &conf,
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "1",
        "--arms",
        "full,ae_lsa_be,ae_lsa_rl,ae_lsa",
        "--train-family",
        "splice",
    ]));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, vec!["full", "ae_lsa_be", "ae_lsa_rl", "ae_lsa"]);
    assert!(csv.lines().next().unwrap().contains("cross_auc_seed4"));
    for key in ["full_ge_ae_lsa_be", "ae_lsa_be_ge_ae_lsa_rl", "ae_lsa_rl_ge_ae_lsa", "full_minus_ae_lsa_ge_0_03", "chain_with_gap"] {
        assert!(summary["orderings"][key].is_boolean(), "{key}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write(&dir.path().join("bad.conf"), "train.learning_rate = 0.1\n");
    let out = forgery(&[
        "train",
        "--config",
        &conf,
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
}

/// Minimal 8-bit RGB PNG of a white square, encoded by hand with stored
/// (uncompressed) deflate blocks.
fn image_bytes_white(side: usize) -> Vec<u8> {
    fn crc32(data: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in data {
            crc ^= u32::from(b);
            for _ in 0..8 {
                crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
            }
        }
        !crc
    }
    fn adler32(data: &[u8]) -> u32 {
        let (mut a, mut b) = (1u32, 0u32);
        for &d in data {
            a = (a + u32::from(d)) % 65521;
            b = (b + a) % 65521;
        }
        (b << 16) | a
    }
    fn chunk(out: &mut Vec<u8>, kind: &[u8], data: &[u8]) {
        out.extend_from_slice(&(data.len() as u32).to_be_bytes());
        let mut body = kind.to_vec();
        body.extend_from_slice(data);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32(&body).to_be_bytes());
    }
    let mut raw = Vec::new();
    for _ in 0..side {
        raw.push(0u8);
        raw.extend(std::iter::repeat_n(255u8, side * 3));
    }
    let mut z = vec![0x78, 0x01, 0x01];
    z.extend_from_slice(&(raw.len() as u16).to_le_bytes());
    z.extend_from_slice(&(!(raw.len() as u16)).to_le_bytes());
    z.extend_from_slice(&raw);
    z.extend_from_slice(&adler32(&raw).to_be_bytes());
    let mut ihdr = Vec::new();
    ihdr.extend_from_slice(&(side as u32).to_be_bytes());
    ihdr.extend_from_slice(&(side as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]);
    let mut out = b"\x89PNG\r\n\x1a\n".to_vec();
    chunk(&mut out, b"IHDR", &ihdr);
    chunk(&mut out, b"IDAT", &z);
    chunk(&mut out, b"IEND", &[]);
    out
}
