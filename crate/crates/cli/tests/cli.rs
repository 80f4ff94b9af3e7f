use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gazereward::corpus::{write_pairs_jsonl, PreferencePair};
use gazereward::synthetic::{text_signal_dataset, TextSignalConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gazereward"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn pairs_file(dir: &Path, n: usize, subsets: bool) -> PathBuf {
    let mut pairs = text_signal_dataset(&TextSignalConfig {
        pairs: n,
        ..TextSignalConfig::default()
    });
    if subsets {
        for (i, pair) in pairs.iter_mut().enumerate() {
            pair.subset = Some(if i % 2 == 0 { "chat" } else { "safety" }.to_string());
        }
    }
    let path = dir.join(if subsets { "labelled.jsonl" } else { "pairs.jsonl" });
    write_pairs_jsonl(&path, &pairs).unwrap();
    path
}

const SMALL: [&str; 8] = ["--d-model", "16", "--n-layers", "1", "--epochs", "1", "--eval-every", "5"];

fn train_into(pairs: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--pairs", p(pairs), "--out", p(out)];
    args.extend(SMALL);
    args.extend(extra);
    run(&args)
}

#[test]
fn prepare_builds_pairs_from_ranked_records() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ranked.jsonl");
    fs::write(
        &input,
        concat!(
            r#"{"id":"a","prompt":"Hi","responses":[{"text":"Hello there","rank":0},{"text":"Go away","rank":2}]}"#,
            "\n",
            r#"{"id":"b","prompt":"Why","responses":[{"text":"Same","rank":1}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("pairs.jsonl");
    let res = run(&["prepare", "--in", p(&input), "--format", "ranked", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let pairs = gazereward::corpus::load_pairs_jsonl(&out).unwrap();
    assert_eq!(pairs, vec![PreferencePair::new("a", "Hi", "Hello there", "Go away")]);

    fs::write(&input, "{not json\n").unwrap();
    assert_eq!(code(&run(&["prepare", "--in", p(&input), "--out", p(&out)])), 2);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&[])), 1);
    let help = run(&["train", "--help"]);
    assert_eq!(code(&help), 0);
    let text = stdout(&help);
    for flag in ["--lr0", "--batch-size", "--scheduler", "--min-lr-fraction", "--fusion", "--combo", "--window", "--overlap", "--epsilon-last-char", "--K", "--val-frac", "--epochs", "--seed", "--config"] {
        assert!(text.contains(flag), "help lacks {flag}");
    }
    assert!(text.contains("[default: 0.0005]"));
    assert!(text.contains("[default: cosine_min]"));
    assert!(text.contains("[default: 0.7]"));
}

#[test]
fn gradcheck_exit_status_follows_tolerance() {
    let ok = run(&["gradcheck", "--fusion", "add", "--format", "csv"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).starts_with("fusion,group,checked,max_rel_error,pass\n"));
    assert_eq!(code(&run(&["gradcheck", "--fusion", "baseline", "--tol", "1e-14"])), 3);
}

#[test]
fn train_is_repeatable_and_eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = pairs_file(dir.path(), 60, false);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = train_into(&pairs, out, &["--fusion", "concat", "--combo", "fcomb2_2", "--seed", "7"]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    for file in ["checkpoint.bin", "history.csv", "config.txt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    assert!(fs::read_to_string(a.join("train.log")).unwrap().contains("done"));
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("step,train_loss,val_loss,lr\n0,,"));

    let ckpt = a.join("checkpoint.bin");
    let report = dir.path().join("report.csv");
    let res = run(&["eval", "--pairs", p(&pairs), "--checkpoint", p(&ckpt), "--format", "csv", "--out", p(&report)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv, stdout(&res));
    assert!(csv.lines().nth(1).unwrap().starts_with("overall,"));
    assert!(csv.lines().nth(1).unwrap().contains(",60,"));

    let corrupt = dir.path().join("corrupt.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&corrupt, bytes).unwrap();
    assert_eq!(code(&run(&["eval", "--pairs", p(&pairs), "--checkpoint", p(&corrupt)])), 2);
}

#[test]
fn explicit_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = pairs_file(dir.path(), 30, false);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tuned\nlr0 = 0.001\nbatch_size = 4\nepochs = 3\n").unwrap();
    let out = dir.path().join("run");
    let res = train_into(&pairs, &out, &["--config", p(&cfg), "--batch-size", "6"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("lr0 = 0.001\n"));
    assert!(written.contains("batch_size = 6\n"));
    // `--epochs 1` from the command line beats `epochs = 3` in the file.
    assert!(written.contains("epochs = 1\n"));

    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    assert_eq!(code(&train_into(&pairs, &out, &["--config", p(&cfg)])), 1);
    assert_eq!(code(&train_into(&pairs, &out, &["--overlap", "600"])), 1);
}

#[test]
fn divergence_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = pairs_file(dir.path(), 30, false);
    let res = train_into(&pairs, &dir.path().join("run"), &["--lr0", "1e300", "--scheduler", "constant"]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn bench_needs_subset_labels() {
    let dir = tempfile::tempdir().unwrap();
    let plain = pairs_file(dir.path(), 30, false);
    let labelled = pairs_file(dir.path(), 30, true);
    let out = dir.path().join("run");
    assert_eq!(code(&train_into(&plain, &out, &[])), 0);
    let ckpt = out.join("checkpoint.bin");
    assert_eq!(code(&run(&["bench", "--pairs", p(&plain), "--checkpoint", p(&ckpt)])), 2);
    let res = run(&["bench", "--pairs", p(&labelled), "--checkpoint", p(&ckpt), "--subsets", "chat,code"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = stdout(&res);
    assert!(text.contains("chat"));
    assert!(!text.contains("safety"));
    assert!(text.contains("warning: subset \"code\""));
    let csv = stdout(&run(&["bench", "--pairs", p(&labelled), "--checkpoint", p(&ckpt), "--format", "csv"]));
    assert!(csv.lines().any(|l| l.starts_with("macro,")));
}

#[test]
fn gaze_features_round_trip_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = pairs_file(dir.path(), 5, false);
    let (first, second) = (dir.path().join("f1.jsonl"), dir.path().join("f2.jsonl"));
    assert_eq!(code(&run(&["gaze", "--pairs", p(&pairs), "--out", p(&first)])), 0);
    let res = run(&["gaze", "--pairs", p(&pairs), "--out", p(&second), "--ingest", p(&first)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    assert_eq!(fs::read_to_string(&first).unwrap().lines().count(), 10);

    let binned = dir.path().join("bins.jsonl");
    assert_eq!(code(&run(&["gaze", "--pairs", p(&pairs), "--out", p(&binned), "--quantize", "--K", "3"])), 0);

    let elsewhere = dir.path().join("other");
    fs::create_dir_all(&elsewhere).unwrap();
    let other = pairs_file(&elsewhere, 6, false);
    assert_eq!(code(&run(&["gaze", "--pairs", p(&other), "--out", p(&second), "--ingest", p(&first)])), 2);

    let res = run(&["train", "--pairs", p(&pairs), "--features", p(&first), "--out", p(&dir.path().join("t")), "--fusion", "add", "--d-model", "8", "--n-layers", "1", "--epochs", "1"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn remap_prints_the_alignment_table() {
    let res = run(&["remap", "--prompt", "What is it?", "--response", "Astrophotography is fun"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = stdout(&res);
    assert!(text.contains("Tokens str"));
    assert!(text.contains("astrophotography") || text.contains("Astrophotography"));
    let csv = stdout(&run(&["remap", "--response", "Astrophotography is fun", "--format", "csv", "--combo", "fcomb2_5", "--channel", "FFD"]));
    assert!(csv.starts_with("group,side,word,token_index,token,value\n"));
    assert_eq!(code(&run(&["remap", "--response", "x", "--channel", "nope"])), 2);
}

#[test]
fn gridsearch_processes_match_in_process_trials() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = pairs_file(dir.path(), 40, false);
    let mut tables = Vec::new();
    for jobs in ["1", "2"] {
        let out = dir.path().join(format!("grid{jobs}"));
        let mut args = vec![
            "gridsearch", "--pairs", p(&pairs), "--out", p(&out), "--jobs", jobs,
            "--batch-sizes", "4,8", "--lrs", "1e-3", "--schedulers", "constant", "--format", "csv",
        ];
        args.extend(SMALL);
        let res = run(&args);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        assert!(out.join("checkpoint.bin").exists());
        let table = fs::read_to_string(out.join("trials.csv")).unwrap();
        assert_eq!(table, stdout(&res));
        tables.push(table);
    }
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0].lines().count(), 3);
}
