use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[model]
vocab_size = 64
d_model = 32
n_layers = 2
d_head = 8
chunk = 8

[train]
steps = 6
peak_lr = 0.003
min_lr = 0.0003
batch_size = 2

[data]
kind = "mqar"
seq_len = 48
n_pairs = 4

[eval]
sequences = 4
needle_items = 3

[eval.needle]
kind = "needle"
seq_len = 48
n_pairs = 6
seed = 2
"#;

fn oryx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oryx")).args(args).output().expect("spawn oryx")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Trains the tiny config into `dir/name` and returns the checkpoint path.
fn train(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, "tiny.toml", TINY);
    let out_dir = dir.join(name);
    let mut args = vec!["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = oryx(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out_dir.join("checkpoint.bin")
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "run", &[]);
    assert!(ckpt.exists());
    let run = dir.path().join("run");
    assert!(run.join("metrics.jsonl").exists());
    assert!(run.join("config.toml").exists());

    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (c, o) = (ckpt.to_str().unwrap(), run.to_str().unwrap());
    let out = oryx(&["switch-curve", "--config", &cfg, "--checkpoint", c, "--out", o]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for plan in ["all_attention", "all_linear", "attention_to_linear@24", "linear_to_attention@24"] {
        assert!(text.contains(plan), "{text}");
    }
    assert!(run.join("switch_curves.jsonl").exists());

    let out = oryx(&["retrieval-eval", "--config", &cfg, "--checkpoint", c, "--out", o]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(run.join("retrieval.tsv")).unwrap();
    assert_eq!(table.lines().count(), 5);

    let out = oryx(&["inspect-checkpoint", c]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("precision f32"), "{text}");
    assert!(text.contains("step 6"), "{text}");
}

#[test]
fn seeds_control_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(train(dir.path(), "a", &[])).unwrap();
    let b = std::fs::read(train(dir.path(), "b", &[])).unwrap();
    let c = std::fs::read(train(dir.path(), "c", &["--seed", "4"])).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let m = |n: &str| std::fs::read(dir.path().join(n).join("metrics.jsonl")).unwrap();
    assert_eq!(m("a"), m("b"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "bad.toml", &format!("{TINY}\n[extra]\nx = 1\n"));
    assert_eq!(code(&oryx(&["train", "--config", &unknown])), 2);

    let invalid = write_config(dir.path(), "odd.toml", &TINY.replace("d_head = 8", "d_head = 6"));
    assert_eq!(code(&oryx(&["train", "--config", &invalid])), 2);

    assert_eq!(code(&oryx(&["flops", "--deltas", "0"])), 2);
}

#[test]
fn checkpoint_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "run", &[]);
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let eval = |config: &str, c: &Path, extra: &[&str]| {
        let mut args = vec!["switch-curve", "--config", config, "--checkpoint", c.to_str().unwrap()];
        args.extend_from_slice(&["--out", dir.path().to_str().unwrap()]);
        args.extend_from_slice(extra);
        code(&oryx(&args))
    };

    assert_eq!(eval(&cfg, &dir.path().join("missing.bin"), &[]), 3);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    let corrupt = dir.path().join("corrupt.bin");
    std::fs::write(&corrupt, &bytes).unwrap();
    assert_eq!(eval(&cfg, &corrupt, &[]), 3);

    let truncated = dir.path().join("truncated.bin");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(eval(&cfg, &truncated, &[]), 3);

    // a different architecture or precision is a configuration mismatch
    let wider = write_config(dir.path(), "wide.toml", &TINY.replace("d_model = 32", "d_model = 48"));
    assert_eq!(eval(&wider, &ckpt, &[]), 2);
    assert_eq!(eval(&cfg, &ckpt, &["--precision", "f64"]), 2);

    // the intact checkpoint still loads
    assert_eq!(eval(&cfg, &ckpt, &[]), 0);
}

#[test]
fn flops_table_and_generated_data() {
    let out = oryx(&["flops", "--lengths", "2048", "--chunks", "128", "--deltas", "0.75"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "2048");
    assert_eq!(row[7], "555");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let o = dir.path().to_str().unwrap();
    for (task, file) in [("mqar", "mqar.jsonl"), ("needle", "needle.jsonl")] {
        let out = oryx(&["gen-data", "--config", &cfg, "--out", o, "--task", task, "--count", "7"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(text.lines().count(), 7);
    }
    assert_ne!(code(&oryx(&["gen-data", "--config", &cfg, "--task", "copy"])), 0);
}
