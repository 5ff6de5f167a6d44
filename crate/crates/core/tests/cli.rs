use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lll_core::cli::checkpoint::Checkpoint;
use lll_core::cli::config::{digest, RunConfig};
use lll_core::cli::eval_checkpoint;
use lll_core::bench::toy::ToyKind;

const TINY: &str = "\
[model]
d_model = 16
n_layers = 1
n_heads = 2
max_seq_len = 32
adapter_position = 1

[adapter]
latent_dim = 8

[train]
epochs_per_task = 2
alt_turns = 1
gamma = 0.2

[data]
n_train = 24
n_test = 8
";

fn lll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lll")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("c.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg, "--output", out.to_str().unwrap(), "--order", "cls,slot"];
    args.extend_from_slice(extra);
    lll(&args)
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn train_writes_config_log_result_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    ok(&train(&cfg, &out, &["--gamma", "0.3", "--mode", "alt", "--turns", "1"]));

    let text = fs::read_to_string(out.join("config.toml")).unwrap();
    let written = RunConfig::parse(&text).unwrap();
    assert_eq!(written.train.gamma, 0.3);
    assert_eq!(written.order, vec![ToyKind::Cls, ToyKind::Slot]);
    let d = digest(&text);

    let log = fs::read_to_string(out.join("run.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 2 + 2);
    for l in &lines {
        assert_eq!(l["config_digest"], d.as_str());
    }
    let epochs: Vec<_> = lines.iter().filter(|l| l["kind"] == "epoch").collect();
    for field in ["stage", "epoch", "phase", "loss_total", "loss_qa", "loss_lm", "loss_id", "loss_kl", "loss_recon"] {
        assert!(epochs[0].get(field).is_some(), "missing {field}");
    }
    let stages: Vec<_> = lines.iter().filter(|l| l["kind"] == "stage").collect();
    assert!(stages[1]["scores"]["slot"].is_number());

    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["config_digest"], d.as_str());
    assert_eq!(result["result"]["final_scores"], stages[1]["scores"]);
    for f in ["latest.ckpt", "stage-0-cls.ckpt", "stage-1-slot.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(Checkpoint::load(&out.join("latest.ckpt")).unwrap().config_digest, d);
}

#[test]
fn reruns_and_resumes_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    ok(&train(&cfg, &out, &[]));
    let log = fs::read(out.join("run.jsonl")).unwrap();
    let res = fs::read(out.join("result.json")).unwrap();
    let mid = dir.path().join("mid.ckpt");
    fs::copy(out.join("stage-0-cls.ckpt"), &mid).unwrap();

    ok(&train(&cfg, &out, &[]));
    assert_eq!(fs::read(out.join("run.jsonl")).unwrap(), log);
    assert_eq!(fs::read(out.join("result.json")).unwrap(), res);

    ok(&train(&cfg, &out, &["--resume", mid.to_str().unwrap()]));
    assert_eq!(fs::read(out.join("run.jsonl")).unwrap(), log);
    assert_eq!(fs::read(out.join("result.json")).unwrap(), res);

    let o = train(&cfg, &out, &["--resume", mid.to_str().unwrap(), "--gamma", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different config"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(lll(&["--help"]).status.code(), Some(0));
    assert_eq!(lll(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lll(&["train", "--gamma", "lots"]).status.code(), Some(1));

    let o = train(&cfg, &dir.path().join("x"), &["--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));

    fs::write(dir.path().join("a.toml"), "[train]\nbatch_sise = 3\n").unwrap();
    let o = lll(&["train", "--config", dir.path().join("a.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_sise"));

    fs::write(dir.path().join("b.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let o = lll(&["train", "--config", dir.path().join("b.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));

    let o = lll(&["eval", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    // Output directory path blocked by a regular file: a runtime failure.
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let o = train(&cfg, &blocker.join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    ok(&train(&cfg, &out, &[]));
    let stage0 = out.join("stage-0-cls.ckpt");

    let o = lll(&["eval", "--checkpoint", stage0.to_str().unwrap(), "--tasks", "cls"]);
    ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let log = fs::read_to_string(out.join("run.jsonl")).unwrap();
    let stage_rec: serde_json::Value = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|l| l["kind"] == "stage")
        .unwrap();
    assert_eq!(v["scores"]["cls"], stage_rec["scores"]["cls"]);
    let again = lll(&["eval", "--checkpoint", stage0.to_str().unwrap(), "--tasks", "cls"]);
    assert_eq!(again.stdout, o.stdout);

    let ck = Checkpoint::load(&out.join("latest.ckpt")).unwrap();
    let scores = eval_checkpoint(&ck, &[ToyKind::Slot]).unwrap();
    assert!((0.0..=100.0).contains(&scores[0].1));

    let latest = out.join("latest.ckpt");
    let gen_out = dir.path().join("g.jsonl");
    let o = lll(&[
        "generate", "--checkpoint", latest.to_str().unwrap(), "--task", "cls", "--count", "5", "--output",
        gen_out.to_str().unwrap(),
    ]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 6);
    assert!(stdout.lines().last().unwrap().contains('%'), "{stdout}");
    let recs = fs::read_to_string(&gen_out).unwrap();
    assert_eq!(recs.lines().count(), 6);
    assert!(recs.lines().all(|l| l.contains(&ck.config_digest)));

    let o = lll(&["generate", "--checkpoint", latest.to_str().unwrap(), "--task", "0", "--count", "0", "-o", gen_out.to_str().unwrap()]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("n/a"));

    let o = lll(&["generate", "--checkpoint", latest.to_str().unwrap(), "--task", "7", "--count", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grid_flushes_each_run_and_sweep_validates_values() {
    let dir = tempfile::tempdir().unwrap();
    let grid = "[grid]\norders = [[\"cls\", \"span\", \"slot\"]]\ngammas = [0.2]\nseeds = [0, 1]\nvariants = [\"baseline\", \"+id\"]\n";
    let p = dir.path().join("g.toml");
    fs::write(&p, format!("{}\n{grid}", TINY)).unwrap();
    let out = dir.path().join("grid");
    let o = lll(&["grid", "--config", p.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    ok(&o);
    let runs = fs::read_to_string(out.join("grid_runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 4);
    let tsv = fs::read_to_string(out.join("grid.tsv")).unwrap();
    assert!(tsv.starts_with("# config_digest: "));
    assert!(tsv.contains("baseline") && tsv.contains("+id"));

    let o = lll(&[
        "sweep", "--config", p.to_str().unwrap(), "--axis", "adapter_position", "--values", "0,9", "--output",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("position 9"));
}
