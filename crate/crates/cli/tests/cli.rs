use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn formnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        cmd, "--out", out,
        "--set", "hidden=8", "--set", "num_heads=2", "--set", "embed_dim=8",
        "--set", "etc_layers=1", "--set", "gcn_layers=1",
        "--set", "steps=4", "--set", "eval_every=2", "--set", "n_docs=20",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn oracles_pass_and_injected_bug_fails() {
    let ok = formnet(&["oracles"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.contains("model_gradients") && !text.contains("FAIL"));

    let bad = formnet(&["oracles", "--inject-bug"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8(bad.stdout).unwrap();
    assert_eq!(text.matches("FAIL").count(), 2, "{text}");
}

#[test]
fn corpus_pretrain_finetune_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let (corpus, pre, ft, ev) = (p("corpus"), p("pre"), p("ft"), p("ev"));

    assert!(formnet(&["gen-corpus", "--out", &corpus, "--set", "n_docs=20"]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&corpus).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["split_sizes"]["train"], 16);

    assert!(formnet(&tiny("pretrain", &pre, &["--corpus", &corpus])).status.success());
    let ck = format!("{pre}/checkpoint");
    assert!(formnet(&tiny("finetune", &ft, &["--corpus", &corpus, "--checkpoint", &ck]))
        .status
        .success());
    let log = fs::read_to_string(Path::new(&ft).join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,lr"));
    assert_eq!(log.lines().count(), 5);

    let best = format!("{ft}/best");
    let out = formnet(&tiny("eval", &ev, &["--corpus", &corpus, "--checkpoint", &best]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("micro,"));
    assert!(Path::new(&ev).join("metrics.csv").is_file());
    assert!(Path::new(&ev).join("run_manifest.json").is_file());
}

#[test]
fn bad_override_is_a_usage_error() {
    let out = formnet(&["pretrain", "--set", "stepz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn eval_without_checkpoint_fails_but_gold_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(formnet(&["eval", "--out", &out, "--set", "n_docs=20"]).status.code(), Some(2));
    let gold = formnet(&["eval", "--gold", "--out", &out, "--set", "n_docs=20"]);
    assert!(gold.status.success());
    assert!(String::from_utf8(gold.stdout).unwrap().contains("micro,1.000000,1.000000,1.000000"));
}
