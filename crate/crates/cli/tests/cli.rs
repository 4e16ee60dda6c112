use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use qdnn::mode::{mode_list, BitMode};
use qdnn::network::{build_smallconv, NetOptions};
use qdnn::trainer::evaluate;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn qdnn(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_qdnn")).args(args).output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Blobs run config with every layer quantized; `extra` is appended under
/// `[train]`.
fn blobs_config(dir: &Path, name: &str, modes: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"output_dir = "{name}"
[model]
kind = "mlp"
sizes = [2, 32, 3]
[network]
exempt_first_last = false
[data]
source = "blobs"
per_class = 60
classes = 3
dimension = 2
separation = 5.0
holdout = 30
[train]
epochs = 6
batch_size = 32
modes = {modes}
{extra}
"#
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, name: &str, modes: &str, extra: &str) -> (PathBuf, String) {
    let config = blobs_config(dir, name, modes, extra);
    let run = qdnn(&["train", p(&config)]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    (config, run.stdout)
}

fn summary(dir: &Path, name: &str) -> Vec<(u8, f64)> {
    let text = fs::read_to_string(dir.join(name).join("summary.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect()
}

fn eval_json(model: &Path, config: &Path, bits: Option<&str>) -> serde_json::Value {
    let mut args = vec!["eval", p(model), "--config", p(config), "--json"];
    if let Some(b) = bits {
        args.extend(["--bits", b]);
    }
    let run = qdnn(&args);
    assert_eq!(run.code, 0, "{}", run.stderr);
    serde_json::from_str(run.stdout.trim()).unwrap()
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (_, stdout) = train(dir.path(), "a", "[1, 2, 4, 32]", "");
    train(dir.path(), "b", "[1, 2, 4, 32]", "");
    let out = dir.path().join("a");
    for file in ["model.qdnn", "train_log.csv", "summary.csv", "config.resolved.toml"] {
        assert!(out.join(file).exists(), "{file}");
    }
    let rows = summary(dir.path(), "a");
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 4, 32]);
    assert!(stdout.contains("32-bit"));
    assert_eq!(rows, summary(dir.path(), "b"));
    assert_eq!(fs::read(out.join("model.qdnn")).unwrap(), fs::read(dir.path().join("b/model.qdnn")).unwrap());
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("stored_bits = 4") && resolved.contains("temperature = 2.0"));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,mode,loss,accuracy"));
    assert_eq!(log.lines().count(), 1 + 6 * 4);
}

#[test]
fn loss_ablation_produces_two_summaries() {
    let dir = TempDir::new().unwrap();
    train(dir.path(), "cons", "[1, 2, 4, 32]", "loss = \"consistency\"");
    train(dir.path(), "ce", "[1, 2, 4, 32]", "loss = \"cross_entropy\"");
    let (cons, ce) = (summary(dir.path(), "cons"), summary(dir.path(), "ce"));
    assert_eq!(cons.len(), 4);
    assert_eq!(ce.len(), 4);
    // The 32-bit objective is identical, but low-bit gradients differ, so the runs diverge.
    assert_ne!(cons, ce);
}

#[test]
fn eval_matches_training_summary_and_in_memory_modes() {
    let dir = TempDir::new().unwrap();
    let (config, _) = train(dir.path(), "run", "[1, 2, 4, 32]", "");
    let model = dir.path().join("run/model.qdnn");
    let at_k = eval_json(&model, &config, None);
    assert_eq!(at_k["mode"], 4);
    let four = summary(dir.path(), "run").into_iter().find(|r| r.0 == 4).unwrap().1;
    assert_eq!(at_k["accuracy"].as_f64().unwrap(), four);

    let stored = qdnn::store::load(&model, BitMode::low(4).unwrap()).unwrap().into_net();
    let valid = {
        let all = qdnn::data::synthetic_blobs(60, 3, 2, 5.0, 0).unwrap();
        all.shuffled_split(150, 0).unwrap().1
    };
    for b in ["1", "2"] {
        let cli = eval_json(&model, &config, Some(b));
        let mode = BitMode::low(b.parse().unwrap()).unwrap();
        let memory = evaluate(&stored, &valid, mode).unwrap();
        assert_eq!(cli["accuracy"].as_f64().unwrap(), memory.accuracy);
        assert_eq!(cli["loss"].as_f64().unwrap(), memory.loss);
    }
}

#[test]
fn eval_json_schema_is_stable() {
    let dir = TempDir::new().unwrap();
    let (config, _) = train(dir.path(), "run", "[2, 4, 32]", "");
    let v = eval_json(&dir.path().join("run/model.qdnn"), &config, Some("2"));
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["accuracy", "loss", "mode", "model", "samples", "stored_bits"]);
}

#[test]
fn switch_then_eval_equals_eval_at_lower_bits() {
    let dir = TempDir::new().unwrap();
    let (config, _) = train(dir.path(), "run", "[2, 3, 4, 32]", "");
    let model = dir.path().join("run/model.qdnn");
    let two = dir.path().join("two.qdnn");
    let run = qdnn(&["switch", p(&model), "--to-bits", "2", "--out", p(&two)]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(fs::metadata(&two).unwrap().len() < fs::metadata(&model).unwrap().len());
    let switched = eval_json(&two, &config, None);
    let direct = eval_json(&model, &config, Some("2"));
    assert_eq!(switched["accuracy"], direct["accuracy"]);
    assert_eq!(switched["loss"], direct["loss"]);

    let three = dir.path().join("three.qdnn");
    let two_via_three = dir.path().join("two-via-three.qdnn");
    assert_eq!(qdnn(&["switch", p(&model), "--to-bits", "3", "--out", p(&three)]).code, 0);
    assert_eq!(qdnn(&["switch", p(&three), "--to-bits", "2", "--out", p(&two_via_three)]).code, 0);
    assert_eq!(fs::read(&two).unwrap(), fs::read(&two_via_three).unwrap());
}

#[test]
fn switch_rejects_same_or_higher_bits() {
    let dir = TempDir::new().unwrap();
    train(dir.path(), "run", "[2, 4, 32]", "");
    let model = dir.path().join("run/model.qdnn");
    let out = dir.path().join("x.qdnn");
    let same = qdnn(&["switch", p(&model), "--to-bits", "4", "--out", p(&out)]);
    assert_eq!(same.code, 2, "{}", same.stderr);
    assert!(!out.exists());
    assert_eq!(qdnn(&["switch", p(&model), "--to-bits", "32", "--out", p(&out)]).code, 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let (config, _) = train(dir.path(), "run", "[2, 4, 32]", "");
    let model = dir.path().join("run/model.qdnn");
    let nine = qdnn(&["eval", p(&model), "--config", p(&config), "--bits", "9"]);
    assert_eq!(nine.code, 2);
    // 8 is a valid width but above the stored 4 bits.
    assert_eq!(qdnn(&["eval", p(&model), "--config", p(&config), "--bits", "8"]).code, 2);
    assert_eq!(qdnn(&["eval", p(&model)]).code, 2);

    let bad = blobs_config(dir.path(), "bad", "[2, 4, 32]", "epochz = 3");
    let run = qdnn(&["train", p(&bad)]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("train") && run.stderr.contains("epochz"), "{}", run.stderr);
    let typed = blobs_config(dir.path(), "typed", "[2, 4, 32]", "momentum = \"high\"");
    let run = qdnn(&["train", p(&typed)]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("train.momentum"), "{}", run.stderr);
}

#[test]
fn data_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("idx.toml");
    fs::write(
        &config,
        r#"output_dir = "out"
[model]
kind = "mlp"
sizes = [784, 16, 10]
[data]
source = "idx"
train_images = "missing-images"
train_labels = "missing-labels"
test_images = "missing-images"
test_labels = "missing-labels"
"#,
    )
    .unwrap();
    let run = qdnn(&["train", p(&config)]);
    assert_eq!(run.code, 3, "{}", run.stderr);
    let garbage = dir.path().join("garbage.qdnn");
    fs::write(&garbage, b"not a model").unwrap();
    assert_eq!(qdnn(&["inspect", p(&garbage)]).code, 3);
}

#[test]
fn divergence_exits_4_with_last_finite_epoch() {
    let dir = TempDir::new().unwrap();
    // Decay this strong multiplies the weights by about -1e19 per step until
    // the penalty overflows.
    let config = blobs_config(dir.path(), "boom", "[2, 32]", "momentum = 0.0\n[train.objective]\nweight_decay = 1e20");
    let run = qdnn(&["train", p(&config)]);
    assert_eq!(run.code, 4, "{}", run.stderr);
    assert!(run.stderr.contains("last finite epoch: 2"), "{}", run.stderr);
    let log = fs::read_to_string(dir.path().join("boom/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 * 2);
}

#[test]
fn inspect_histograms_and_thresholds() {
    let dir = TempDir::new().unwrap();
    train(dir.path(), "run", "[1, 2, 4, 32]", "");
    let model = dir.path().join("run/model.qdnn");
    let out = dir.path().join("inspect");
    let run = qdnn(&["inspect", p(&model), "--out", p(&out)]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let hist = fs::read_to_string(out.join("histograms.csv")).unwrap();
    let mut occupied = std::collections::BTreeMap::<(usize, u8), (usize, usize)>::new();
    for line in hist.lines().skip(1) {
        let f: Vec<usize> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let entry = occupied.entry((f[0], f[1] as u8)).or_default();
        entry.0 += 1;
        entry.1 += (f[3] > 0) as usize;
    }
    assert_eq!(occupied.len(), 2 * 3);
    for ((_, mode), (bins, nonzero)) in occupied {
        assert_eq!(bins, 1 << mode);
        assert!(nonzero <= 1 << mode);
        if mode == 1 {
            assert_eq!(nonzero, 2);
        }
    }
    let thresholds = fs::read_to_string(out.join("thresholds.csv")).unwrap();
    assert_eq!(thresholds.lines().count(), 1 + 1 + 3 + 15);
    assert!(thresholds.contains("2,1,1,2,0.5"));
}

#[test]
fn smallconv_normalization_share_is_small() {
    let dir = TempDir::new().unwrap();
    let modes = mode_list(&[1, 2, 4, 32]).unwrap();
    let net = build_smallconv(1.0, &modes, &NetOptions::default()).unwrap();
    let model = dir.path().join("conv.qdnn");
    qdnn::store::save(&net, BitMode::low(4).unwrap(), &model).unwrap();
    let run = qdnn(&["inspect", p(&model), "--json"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let report: serde_json::Value = serde_json::from_str(&run.stdout).unwrap();
    let ratio = report["norm_byte_ratio"].as_f64().unwrap();
    println!("smallconv normalization share: {ratio:.4}");
    assert!(ratio < 0.05, "{ratio}");
    assert_eq!(report["bytes"]["total"].as_u64().unwrap(), fs::metadata(&model).unwrap().len());
}
