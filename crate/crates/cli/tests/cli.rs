use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mge")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn total_row(ledger: &str) -> String {
    ledger.lines().last().unwrap().to_string()
}

#[test]
fn dry_run_ledgers_match_reference_totals() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 3] = [
        (&["--strategy", "single", "--task", "denoise", "--size", "32", "--iters", "2000", "--n1", "16"], "480000,1"),
        (&["--strategy", "multiscale", "--iters", "2000", "--n1", "16"], "74000,1"),
        (&["--strategy", "full_multiscale", "--schedule", "2000,1000,500,250", "--n1", "16"], "28750,1"),
    ];
    for (i, (flags, want)) in cases.iter().enumerate() {
        let out = format!("run{i}");
        let mut args = vec!["train", "--dry-run", "--out", &out];
        args.extend_from_slice(flags);
        let o = mge(tmp.path(), &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let ledger = fs::read_to_string(tmp.path().join(&out).join("ledger.csv")).unwrap();
        assert!(total_row(&ledger).ends_with(want), "{ledger}");
        assert!(tmp.path().join(&out).join("effective_config").exists());
    }
}

#[test]
fn training_is_reproducible_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.cfg"), "# tiny run\ntrain.eval_every = 5\nmodel.channels = 2,4,1\ntask.n_train = 64\n").unwrap();
    let args = |out: &'static str| ["train", "--config", "small.cfg", "--iters", "10", "--n1", "2", "--levels", "3", "--out", out];
    let a = mge(tmp.path(), &args("a"));
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert!(stdout(&a).contains("total WU: "));
    assert!(stdout(&a).contains("final mse: "));
    for f in ["history.csv", "ledger.csv", "checkpoint.txt", "effective_config"] {
        assert!(tmp.path().join("a").join(f).exists(), "{f} missing");
    }
    let b = mge(tmp.path(), &args("b"));
    assert_eq!(code(&b), 0);
    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "history.csv"), read("b", "history.csv"));
    assert_eq!(read("a", "checkpoint.txt"), read("b", "checkpoint.txt"));

    let c = mge(tmp.path(), &["train", "--config", "a/effective_config", "--out", "c"]);
    assert_eq!(code(&c), 0);
    assert_eq!(read("a", "history.csv"), read("c", "history.csv"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["train", "--dry-run", "--out", "r"];
    assert_eq!(code(&mge(tmp.path(), &args)), 0);
    let again = mge(tmp.path(), &args);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&mge(tmp.path(), &["train", "--dry-run", "--out", "r", "--force"])), 0);
}

#[test]
fn usage_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("typo.cfg"), "train.lrr = 0.1\n").unwrap();
    let o = mge(tmp.path(), &["train", "--config", "typo.cfg", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lrr"));

    let o = mge(tmp.path(), &["train", "--lr", "fast", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lr"));

    let o = mge(tmp.path(), &["train", "--strategy", "multiscale", "--schedule", "1,2", "--out", "x"]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&mge(tmp.path(), &["experiment", "nope", "--out", "x"])), 2);
    assert_eq!(code(&mge(tmp.path(), &["train", "--no-such-flag"])), 2);
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn verify_suites_and_negative_control() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mge(tmp.path(), &["verify", "--suite", "wu", "--out", "wu"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 1);

    let o = mge(tmp.path(), &["verify", "--out", "all"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 4);

    let o = mge(tmp.path(), &["verify", "--suite", "grad", "--inject-conv-grad-scale", "1.01", "--out", "bad"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL grad"));
}

#[test]
fn experiments_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mge(tmp.path(), &["experiment", "example1", "--sigmas", "0,0.1,0.5,1.0", "--levels", "5", "--out", "e"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join("e/example1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sigma,level_pair,delta_g,oracle_delta_g");
    assert_eq!(csv.lines().count(), 1 + 16);

    let o = mge(tmp.path(), &["experiment", "coarsen_crop", "--sizes", "128,64,32", "--out", "c"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join("c/coarsen_crop.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "h,r_coarsen,r_crop,n_samples");
    assert_eq!(csv.lines().count(), 4);

    let o = mge(tmp.path(), &["experiment", "variance", "--repeats", "32", "--out", "v"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join("v/variance.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("diff,")));
    assert!(csv.lines().any(|l| l.starts_with("base,")));
}
