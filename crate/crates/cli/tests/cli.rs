use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msfnet::ablation::CSV_HEADER;
use msfnet::checkpoint::load_checkpoint;
use msfnet::dataset::{load_dataset, Split};
use msfnet::eval::{evaluate_model, miou};
use msfnet::t4::read_t4;
use msfnet::train::{cosine_lr, strip_wall_clock, LogEntry, CHECKPOINT_FILE, LOG_FILE};
use msfnet::IGNORE;

const SUBCOMMANDS: [&str; 7] = ["gen-data", "train", "eval", "boundary", "flops", "bench", "ablate"];

fn msfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfnet"))
        .args(args)
        .env_remove("MSF_THREADS")
        .output()
        .expect("spawn msfnet")
}

fn ok(args: &[&str]) -> String {
    let out = msfnet(args);
    assert!(
        out.status.success(),
        "msfnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 8 train and 4 val samples at 64×64 with 3 classes.
fn small_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--seed",
        "7",
        "--samples",
        "8",
        "--val-samples",
        "4",
        "--size",
        "64",
        "--classes",
        "3",
    ]);
    data
}

fn read_log(run: &Path) -> Vec<LogEntry> {
    fs::read_to_string(run.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn snapshot_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/snapshots")
        .join(format!("{name}.help.txt"))
}

#[test]
fn help_text_matches_snapshots() {
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let mut names = vec!["msfnet".to_string()];
    names.extend(SUBCOMMANDS.iter().map(|c| c.to_string()));
    for name in names {
        let args: Vec<&str> = if name == "msfnet" {
            vec!["--help"]
        } else {
            vec![&name, "--help"]
        };
        let text = ok(&args);
        let path = snapshot_path(&name);
        if update {
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, &text).unwrap();
            continue;
        }
        let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
        assert_eq!(
            text, expected,
            "help for `{name}` drifted; rerun with UPDATE_SNAPSHOTS=1 after review"
        );
    }
}

#[test]
fn help_shows_defaults() {
    let text = ok(&["bench", "--help"]);
    assert!(text.contains("[default: 500]"), "{text}");
    let text = ok(&["train", "--help"]);
    assert!(text.contains("[default: micro]"), "{text}");
}

#[test]
fn train_log_follows_cosine_schedule_and_eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "3",
    ]);

    let log = read_log(&run);
    // 8 samples at batch 4 over 2 epochs.
    assert_eq!(log.len(), 4);
    let total = log.len();
    for (i, e) in log.iter().enumerate() {
        assert_eq!(e.step, i);
        assert_eq!(e.lr, cosine_lr(i, total, 1e-4, 1e-6).unwrap());
    }
    assert!(log.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert!(run.join("config.txt").exists());

    let ckpt = run.join(CHECKPOINT_FILE);
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val"]);
    let line = stdout.lines().find(|l| l.starts_with("mIoU: ")).expect("mIoU line");
    let printed: f64 = line["mIoU: ".len()..].parse().unwrap();

    let ck = load_checkpoint(&ckpt).unwrap();
    let val = load_dataset(&data, Split::Val).unwrap().load_all().unwrap();
    let cm = evaluate_model(&ck.model, &val, &ck.channel_means, IGNORE).unwrap();
    assert_eq!(printed, miou(&cm).unwrap().1);

    let report = dir.path().join("report.csv");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--format",
        "csv",
        "--out",
        s(&report),
    ]);
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for run in &runs {
        ok(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(run),
            "--max-steps",
            "3",
            "--batch-size",
            "4",
        ]);
    }
    let strip = |run: &Path| -> Vec<String> {
        fs::read_to_string(run.join(LOG_FILE))
            .unwrap()
            .lines()
            .map(|l| strip_wall_clock(l).unwrap())
            .collect()
    };
    assert_eq!(strip(&runs[0]), strip(&runs[1]));
    assert_eq!(
        fs::read(runs[0].join(CHECKPOINT_FILE)).unwrap(),
        fs::read(runs[1].join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn ablate_pooling_count_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let csv = dir.path().join("abl.csv");
    ok(&[
        "ablate",
        "pooling-count",
        "--values",
        "0,1,2,3,4,5,end",
        "--data",
        s(&data),
        "--out",
        s(&csv),
        "--max-steps",
        "1",
        "--set",
        "train.batch_size=4",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    let values: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0", "1", "2", "3", "4", "5", "end"]);
    // Deep pooling on 64×64 crops cannot satisfy the divisibility requirement.
    assert!(lines[1].contains(",ok,"));
    assert!(lines[6].contains("infeasible"));
}

#[test]
fn unknown_config_key_is_an_error() {
    let out = msfnet(&["flops", "--set", "model.fusion_widht=8"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("model.fusion_widht"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "train.batch_size = 4\ntrain.bogus = 1\n").unwrap();
    let out = msfnet(&["flops", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn bad_thread_count_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_msfnet"))
        .args(["boundary", "--data", s(&data), "--out", s(&dir.path().join("b"))])
        .env("MSF_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn boundary_writes_one_map_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let single = dir.path().join("b1");
    ok(&[
        "boundary",
        "--data",
        s(&data),
        "--out",
        s(&single),
        "--stride",
        "8",
        "--epsilon",
        "1",
    ]);
    let ids = load_dataset(&data, Split::Train).unwrap().ids().to_vec();
    assert_eq!(ids.len(), 8);
    for id in &ids {
        let t = read_t4(single.join(format!("{id}.t4"))).unwrap();
        assert_eq!(t.dims(), [8, 8]);
    }

    // Threaded loading writes identical maps.
    let threaded = dir.path().join("b3");
    let out = Command::new(env!("CARGO_BIN_EXE_msfnet"))
        .args([
            "boundary",
            "--data",
            s(&data),
            "--out",
            s(&threaded),
            "--stride",
            "8",
            "--epsilon",
            "1",
        ])
        .env("MSF_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    for id in &ids {
        let name = format!("{id}.t4");
        assert_eq!(
            fs::read(single.join(&name)).unwrap(),
            fs::read(threaded.join(&name)).unwrap()
        );
    }
}

#[test]
fn flops_reports_macs_and_double_flops() {
    let stdout = ok(&[
        "flops", "--preset", "micro", "--height", "64", "--width", "64", "--layers",
    ]);
    let get = |key: &str| -> u64 {
        let line = stdout.lines().find(|l| l.starts_with(key)).unwrap();
        line[key.len()..].trim().parse().unwrap()
    };
    let macs = get("macs:");
    assert!(macs > 0);
    assert_eq!(get("flops:"), 2 * macs);
    assert!(stdout.lines().count() > 3);

    let out = msfnet(&["flops", "--preset", "micro", "--height", "60", "--width", "64"]);
    assert!(!out.status.success());
}

#[test]
fn bench_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("lat.json");
    let stdout = ok(&[
        "bench",
        "--preset",
        "micro",
        "--height",
        "64",
        "--width",
        "64",
        "--runs",
        "3",
        "--warmup",
        "1",
        "--out",
        s(&json),
    ]);
    assert!(stdout.contains("runs: 3"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let samples: Vec<f64> = v["samples_ms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(samples.len(), 3);
    assert_eq!(v["mean_ms"].as_f64().unwrap(), samples.iter().sum::<f64>() / 3.0);
}
