use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mbrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbrec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mbrec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = "users=30\nitems=40\nbehaviors=3\ndensities=0.2,0.15,0.12\nnoise_fraction=0.5\nseed=3\n";
const CONFIG: &str = "dim=8\nepochs=3\nbatch_size=64\nhsic_batch=32\nlr=0.01\neval_every=1\nearly_stop_patience=0\n";

fn setup(root: &Path) {
    fs::write(root.join("spec.txt"), SPEC).unwrap();
    fs::write(root.join("cfg.txt"), CONFIG).unwrap();
    ok(&["synth", "--spec", p(&root.join("spec.txt")), "--out", p(&root.join("data"))]);
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    assert!(root.join("data/labels/aux1.txt").exists());
    let data = root.join("data");
    let cfg = root.join("cfg.txt");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&root.join("run"))]);
    let ckpt = root.join("run/best.ckpt");
    let csv = ok(&["eval", "--checkpoint", p(&ckpt), "--k", "10,20"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "metric,K,value");
    let keys: Vec<String> = rows[1..]
        .iter()
        .map(|r| r.rsplit_once(',').unwrap().0.to_string())
        .collect();
    assert_eq!(keys, ["HR,10", "HR,20", "NDCG,10", "NDCG,20"]);

    let sampled = ok(&["eval", "--checkpoint", p(&ckpt), "--k", "5", "--sampled-negatives", "9"]);
    assert_eq!(sampled.lines().count(), 3);

    let ret = ok(&["report-retention", "--checkpoint", p(&ckpt)]);
    assert!(ret.starts_with("behavior,mean_gate,hard_retention,precision,recall\naux1,"));
    assert_eq!(ret.lines().count(), 3);

    let out = root.join("emb.csv");
    ok(&["export-embeddings", "--checkpoint", p(&ckpt), "--out", p(&out)]);
    let emb = fs::read_to_string(out).unwrap();
    assert_eq!(emb.lines().count(), 1 + 30 + 40);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 3 + 16);
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let data = root.join("data");
    let cfg = root.join("cfg.txt");
    for run in ["a", "b"] {
        ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&root.join(run))]);
    }
    for f in ["metrics.csv", "best.ckpt", "last.ckpt"] {
        assert_eq!(fs::read(root.join("a").join(f)).unwrap(), fs::read(root.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn inject_noise_audit_size() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let before = fs::read_to_string(root.join("data/behaviors/aux1.txt")).unwrap().lines().count();
    ok(&[
        "inject-noise", "--data", p(&root.join("data")), "--behavior", "aux1", "--ratio", "0.2", "--seed", "4",
        "--out", p(&root.join("noisy")),
    ]);
    let audit = fs::read_to_string(root.join("noisy/injected_edges.txt")).unwrap().lines().count();
    assert_eq!(fs::read_to_string(root.join("noisy/audit/aux1.txt")).unwrap().lines().count(), audit);
    assert_eq!(audit, (0.2 * before as f64).floor() as usize);
    let after = fs::read_to_string(root.join("noisy/behaviors/aux1.txt")).unwrap().lines().count();
    assert_eq!(after, before + audit);
}

#[test]
fn robustness_report_shape() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    fs::write(root.join("cfg.txt"), "dim=8\nepochs=2\nbatch_size=64\nhsic_batch=32\neval_every=0\n").unwrap();
    let report = ok(&["robustness", "--config", p(&root.join("cfg.txt")), "--data", p(&root.join("data"))]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "variant,row,HR@10,NDCG@10,HR@20,NDCG@20");
    let rows: Vec<String> = lines[1..].iter().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(
        rows,
        ["GCIB,Clean", "GCIB,+ Noise", "GCIB,Rel. Change", "-IB,Clean", "-IB,+ Noise", "-IB,Rel. Change"]
    );
}

#[test]
fn prepare_raw_directory() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir(&raw).unwrap();
    fs::write(raw.join("click.txt"), "a\tx\na\ty\nb\ty\nb\tz\n").unwrap();
    fs::write(raw.join("buy.txt"), "a\tx\na\ty\nb\tz\n").unwrap();
    let out = ok(&["prepare", p(&raw), "--target", "buy", "--seed", "1", "--out", p(&dir.path().join("prep"))]);
    assert!(out.contains("users=2 items=3 behaviors=2 held_out=1 excluded=1"), "{out}");
    assert!(dir.path().join("prep/test.txt").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(mbrec(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(mbrec(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = mbrec(&["eval", "--checkpoint", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let raw = dir.path().join("raw");
    fs::create_dir(&raw).unwrap();
    fs::write(raw.join("click.txt"), "a\tx\n").unwrap();
    let out = mbrec(&["prepare", p(&raw), "--target", "buy", "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(dir.path().join("bad.txt"), "learning_rate=1\n").unwrap();
    let out = mbrec(&["train", "--config", p(&dir.path().join("bad.txt")), "--data", p(&raw), "--out", p(&raw)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn help_lists_flags_and_config_keys() {
    let help = ok(&["train", "--help"]);
    for needle in ["--config", "--data", "--out", "--seed", "--ablation", "concrete_temp", "gate_input", "hsic_repr"] {
        assert!(help.contains(needle), "missing {needle}");
    }
    for sub in ["prepare", "synth", "eval", "inject-noise", "report-retention", "robustness", "export-embeddings"] {
        assert!(mbrec(&[sub, "--help"]).status.success(), "{sub}");
    }
    assert!(ok(&["eval", "--help"]).contains("--sampled-negatives"));
    assert!(ok(&["report-retention", "--help"]).contains("--hard-gates"));
}
