use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spcl_core::oracle;

fn spcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spcl"))
        .args(args)
        .env_remove("SPCL_SEED")
        .output()
        .expect("binary runs")
}

fn spcl_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spcl"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_column(text: &str, col: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == col).unwrap_or_else(|| panic!("no column {col}"));
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn solve_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = data("two_state.json");
    let out = spcl(&["solve", "--mdp", s(&mdp), "--kind", "sparse", "--alpha", "1", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["values.csv", "policy.csv", "summary.csv", "bounds.csv"] {
        assert_eq!(read(&dir.path().join(f)), read(&golden("two_state_sparse").join(f)), "{f}");
    }
}

/// The committed golden values, checked against a direct solve of the two-state sparse
/// Bellman equation written out by hand: state 1 keeps only action 1, state 0 keeps both.
#[test]
fn golden_values_solve_the_sparse_bellman_equation() {
    let values: Vec<f64> = csv_column(&read(&golden("two_state_sparse").join("values.csv")), "value")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let (mut v0, mut v1) = (0.0f64, 0.0f64);
    for _ in 0..5000 {
        let q00 = 1.0 + 0.9 * (0.9 * v0 + 0.1 * v1);
        let q01 = 0.5 + 0.9 * (0.2 * v0 + 0.8 * v1);
        let q11 = 2.0 + 0.9 * (0.25 * v0 + 0.75 * v1);
        // two-action support: threshold g = (q00 + q01 - 1) / 2, value 1/2 (1 + sum q^2 - 2 g^2)
        let g = (q00 + q01 - 1.0) / 2.0;
        let n0 = 0.5 * (1.0 + q00 * q00 + q01 * q01 - 2.0 * g * g);
        (v0, v1) = (n0, q11);
    }
    assert!((values[0] - v0).abs() < 1e-8, "{} vs {v0}", values[0]);
    assert!((values[1] - v1).abs() < 1e-8, "{} vs {v1}", values[1]);

    // the committed policy is the simplex projection of Q at those values
    let probs: Vec<f64> = csv_column(&read(&golden("two_state_sparse").join("policy.csv")), "prob")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let q0 = [1.0 + 0.9 * (0.9 * v0 + 0.1 * v1), 0.5 + 0.9 * (0.2 * v0 + 0.8 * v1)];
    let q1 = [0.9 * (0.5 * v0 + 0.5 * v1), 2.0 + 0.9 * (0.25 * v0 + 0.75 * v1)];
    let expect: Vec<f64> = [oracle::simplex_projection_bruteforce(&q0), oracle::simplex_projection_bruteforce(&q1)].concat();
    for (p, e) in probs.iter().zip(&expect) {
        assert!((p - e).abs() < 1e-8, "{probs:?} vs {expect:?}");
    }
    assert_eq!(probs[2], 0.0);
}

#[test]
fn sparse_support_never_exceeds_soft_and_tolerance_bounds_value_error() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = data("two_state.json");
    let run = |kind: &str, tol: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = spcl(&["solve", "--mdp", s(&mdp), "--kind", kind, "--tol", tol, "--out", s(&out_dir)]);
        assert!(out.status.success());
        out_dir
    };
    let sparse = run("sparse", "1e-10", "sp");
    let soft = run("soft", "1e-10", "sf");
    let support = |d: &Path| csv_column(&read(&d.join("summary.csv")), "value")[8].parse::<usize>().unwrap();
    assert!(support(&sparse) <= support(&soft));
    assert_eq!(support(&soft), 2);

    let coarse = run("sparse", "1e-2", "coarse");
    let iters = |d: &Path| csv_column(&read(&d.join("summary.csv")), "value")[4].parse::<usize>().unwrap();
    assert!(iters(&coarse) < iters(&sparse));
    let vals = |d: &Path| -> Vec<f64> { csv_column(&read(&d.join("values.csv")), "value").iter().map(|v| v.parse().unwrap()).collect() };
    for (a, b) in vals(&coarse).iter().zip(vals(&sparse)) {
        assert!((a - b).abs() <= 1e-2 / (1.0 - 0.9), "{a} vs {b}");
    }
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = spcl(&["train", "--task", "copy", "--vocab", "5", "--mode", "sparse", "--seed", "7", "--steps", "40", "--out", s(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["metrics.csv", "comparison.csv", "model.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(read(&a.join("metrics.csv")).lines().count(), 41);
}

#[test]
fn zero_steps_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = spcl(&["train", "--steps", "0", "--out", s(dir.path())]);
    assert!(out.status.success());
    assert_eq!(read(&dir.path().join("metrics.csv")), "iter,env_steps,avg_reward,loss,support_size,max_prob,seed\n");
}

#[test]
fn sweep_writes_per_seed_directories_and_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = spcl(&[
        "train", "--task", "copy", "--vocab", "5,40", "--mode", "soft,sparse", "--seeds", "2", "--steps", "5", "--eval-episodes", "5",
        "--out", s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read(&dir.path().join("comparison.csv"));
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 2);
    assert_eq!(csv_column(&table, "n_actions")[0], "12");
    assert_eq!(csv_column(&table, "n_actions")[4], "82");
    for label in ["copy-v5-soft", "copy-v5-sparse", "copy-v40-soft", "copy-v40-sparse"] {
        for seed in 0..2 {
            assert!(dir.path().join(label).join(format!("seed-{seed}")).join("metrics.csv").exists());
        }
    }
}

#[test]
fn config_precedence_flag_over_file_over_env_over_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# sweep\nalpha = 0.5\nseed = 3\nmax_len = 4\nno_replay = true\n").unwrap();
    let resolved = |sub: &str| read(&dir.path().join(sub).join("resolved_config"));

    let out = spcl(&["train", "--steps", "0", "--config", s(&cfg), "--seed", "4", "--out", s(&dir.path().join("a"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = resolved("a");
    for line in ["alpha = 0.5", "seed = 4", "max-len = 4", "no-replay = true", "lr = 0.01"] {
        assert!(r.lines().any(|l| l == line), "missing `{line}` in\n{r}");
    }

    let out = spcl_env(&["train", "--steps", "0", "--out", s(&dir.path().join("b"))], "SPCL_SEED", "9");
    assert!(out.status.success());
    assert!(resolved("b").lines().any(|l| l == "seed = 9"));

    let out = spcl_env(&["train", "--steps", "0", "--config", s(&cfg), "--out", s(&dir.path().join("c"))], "SPCL_SEED", "9");
    assert!(out.status.success());
    assert!(resolved("c").lines().any(|l| l == "seed = 3"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = spcl(&["train", "--steps", "10", "--seed", "5", "--alpha", "0.2", "--out", s(&first)]);
    assert!(out.status.success());
    let second = dir.path().join("second");
    let out = spcl(&["train", "--config", s(&first.join("resolved_config")), "--out", s(&second)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&first.join("metrics.csv")), read(&second.join("metrics.csv")));
}

#[test]
fn unknown_config_keys_and_bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "alpah = 0.5\n").unwrap();
    let out = spcl(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    assert_eq!(spcl(&["train", "--mode", "hard"]).status.code(), Some(1));
    assert_eq!(spcl(&["check", "everything"]).status.code(), Some(1));
    assert_eq!(spcl(&["solve", "--mdp", "/nonexistent.json", "--out", s(dir.path())]).status.code(), Some(1));
}

#[test]
fn divergence_exits_3_and_keeps_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = spcl(&["train", "--task", "bandit", "--window", "1", "--lr", "1e12", "--steps", "50", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read(&dir.path().join("metrics.csv"));
    assert!(metrics.starts_with("iter,"));
    assert!(metrics.lines().count() < 51);
    assert!(dir.path().join("model.ckpt").exists());
    assert!(read(&dir.path().join("comparison.csv")).contains("diverged"));
}

#[test]
fn check_passes_and_reports_gaps_beside_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = spcl(&["check", "all", "--trials", "5", "--seed", "1", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let summary = read(&dir.path().join("summary.csv"));
    assert!(summary.starts_with("suite,check,trials,max_violation,tolerance,status\n"));
    assert!(!summary.contains("FAIL"));
    let gaps = read(&dir.path().join("consistency_gaps.csv"));
    let header = gaps.lines().next().unwrap();
    assert!(header.contains("sparse_gap,sparse_bound"));
}

#[test]
fn eval_dump_and_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let out = spcl(&["train", "--steps", "20", "--out", s(&train_dir)]);
    assert!(out.status.success());
    let dump = dir.path().join("episode.txt");
    let out = spcl(&[
        "eval", "--checkpoint", s(&train_dir.join("model.ckpt")), "--episodes", "10", "--dump", s(&dump), "--seed", "3",
        "--out", s(&dir.path().join("eval")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read(&dump).starts_with("# task=copy vocab=5 min_len=1 max_len=5 seed=3\nt,obs,action,reward,done\n"));
    let eval_csv = read(&dir.path().join("eval").join("eval.csv"));
    assert_eq!(csv_column(&eval_csv, "episodes"), vec!["10"]);

    let out = spcl(&["eval", "--replay", s(&dump), "--out", s(&dir.path().join("replay"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // a scripted dump collects the maximal reward and replays too
    let scripted = dir.path().join("scripted.txt");
    let out = spcl(&["eval", "--task", "reverse", "--vocab", "3", "--dump", s(&scripted), "--seed", "8", "--out", s(&dir.path().join("s"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = spcl(&["eval", "--replay", s(&scripted), "--out", s(&dir.path().join("s2"))]);
    assert!(out.status.success());

    let tampered = read(&scripted).replacen(",1,0\n", ",0,0\n", 1);
    let bad = dir.path().join("tampered.txt");
    std::fs::write(&bad, tampered).unwrap();
    let out = spcl(&["eval", "--replay", s(&bad), "--out", s(&dir.path().join("s3"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_defaults() {
    let out = spcl(&["train", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "--window <WINDOW>", "[default: 4]", "[default: 50]", "[default: per_action]", "[default: 0.5]", "[default: 10000]", "SPCL_SEED",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
    let out = spcl(&["solve", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    assert!(help.contains("[default: 1e-10]"));
    assert!(help.contains("[default: 1000000]"));
    for sub in ["eval", "check"] {
        assert!(spcl(&[sub, "--help"]).status.success());
    }
}
