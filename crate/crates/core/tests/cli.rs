use std::path::Path;
use std::process::{Command, Output};

fn car(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_car"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn params_prints_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let o = car(dir.path(), &["params", "--scheme", "CAR3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("backbone   157619"), "{text}");
    assert!(text.contains("trainable  18165"), "{text}");
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = car(d, &["params", "--scheme", "CAR9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("CAR9"));

    let o = car(d, &["adapt", "--scheme", "F3", "--checkpoint", "absent.carp", "--out", "x.carp"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("car pretrain"), "{}", stderr(&o));

    std::fs::write(d.join("bad.json"), r#"{"adapt": {"batch_size": 0}}"#).unwrap();
    let o = car(d, &["--config", "bad.json", "params", "--scheme", "F0"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(d.join("junk.carc"), b"not a corpus").unwrap();
    let o = car(d, &["eval", "--checkpoint", "absent.carp", "--corpus", "junk.carc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_corpus_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(car(d, &["gen-corpus", "--n-utts", "3", "--out", "c.carc"]).status.success());
    assert!(car(d, &["--config", "tiny.json", "params", "--scheme", "F0"]).status.code() == Some(2));
    std::fs::write(d.join("tiny.json"), r#"{"pretrain": {"steps": 2}}"#).unwrap();
    assert!(car(d, &["--config", "tiny.json", "pretrain", "--corpus", "c.carc", "--out", "b.carp"]).status.success());
    std::fs::write(d.join("junk.carc"), b"CARCxxxx").unwrap();
    let o = car(d, &["eval", "--checkpoint", "b.carp", "--corpus", "junk.carc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ssl_study_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "corpus": {"pretrain_utts": 12, "adapt_utts": 6, "test_utts": 4},
        "pretrain": {"steps": 4},
        "adapt": {"steps": 3},
        "study": {"seeds": [0], "target_languages": 1, "study3_schemes": ["J0", "J2"]}
    }"#;
    std::fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let o = car(dir.path(), &["--config", "cfg.json", "study", "--id", "3", "--csv", "s3.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("s3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(stdout(&o).contains("J2"));
}
