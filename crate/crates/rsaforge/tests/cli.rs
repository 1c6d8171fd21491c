use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

use rsaforge::cli::{checkpoint_file, TRAIN_LOG};
use rsaforge::data::{read_archive, read_bytes, read_tensor, write_archive};
use rsaforge::pipeline::{read_report, rdm_path};
use rsaforge::report::{parse_report_csv, read_ledger, ReportRow, REPORT_HEADER};
use rsaforge_core::rsa::{Region, Rdm, SubjectRdmSet};
use rsaforge_core::{Tensor, TAPS};

fn rsaforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsaforge"))
        .args(args)
        .env_remove("RSAFORGE_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = rsaforge(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", stderr(&out));
    out
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

const TINY_NET: [&str; 8] = [
    "--channels", "4,4,8,8", "--input-size", "16", "--batch-size", "8", "--seed", "3",
];

fn train_tiny(out: &Path, epochs: usize) -> Output {
    let mut args = vec![
        "train".to_string(),
        "--synthetic".into(),
        "classes=4,per_class=8,size=16".into(),
        "--epochs".into(),
        epochs.to_string(),
        "--out".into(),
        s(out),
    ];
    args.extend(TINY_NET.iter().map(|a| a.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args)
}

/// One ten-epoch tiny run shared by the tests that only read it.
fn shared_run() -> &'static Path {
    static RUN: OnceLock<PathBuf> = OnceLock::new();
    RUN.get_or_init(|| {
        let run = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_seed3");
        if run.exists() {
            fs::remove_dir_all(&run).unwrap();
        }
        train_tiny(&run, 10);
        run
    })
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("o"));
    let synthetic = ["--synthetic", "classes=4,per_class=2"];
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["frobnicate"],
        [&["train", "--lr", "-1", "--out", &out][..], &synthetic].concat(),
        [&["train", "--lr", "0", "--out", &out][..], &synthetic].concat(),
        [&["train", "--momentum", "1", "--out", &out][..], &synthetic].concat(),
        [&["train", "--weight-decay", "-0.1", "--out", &out][..], &synthetic].concat(),
        [&["train", "--epochs", "5", "--max-epochs", "3", "--out", &out][..], &synthetic].concat(),
        [&["train", "--batch-size", "0", "--out", &out][..], &synthetic].concat(),
        [&["train", "--channels", "4,4,8", "--out", &out][..], &synthetic].concat(),
        vec!["train", "--out", &out],
        vec!["train", "--synthetic", "classes=1,per_class=2", "--out", &out],
        vec!["train", "--synthetic", "classes=4,per_class=2", "--data", "x.rdma", "--out", &out],
        vec!["extract", "--checkpoint", "c.rdma", "--images", "i.rdma"],
        vec!["rdm", "--activations", "a.rdma"],
        vec!["score", "--rdms", "r", "--out", "s.json"],
        vec!["evaluate"],
        vec!["report", "--ledger", "l.json", "--format", "xml"],
        vec!["synth", "--images-out", "i.rdma", "--brain-out", "b.rdma", "--stimuli", "2"],
    ];
    for args in cases {
        let got = rsaforge(&args);
        assert_eq!(code(&got), 2, "{args:?}\n{}", stderr(&got));
        assert!(!stderr(&got).is_empty(), "{args:?}");
    }
    assert!(!dir.path().join("o").exists());
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("missing.rdma"));
    let out = s(&dir.path().join("out"));
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--data", &missing, "--out", &out],
        vec!["extract", "--checkpoint", &missing, "--images", &missing, "--out", &out],
        vec!["rdm", "--activations", &missing, "--out", &out],
        vec!["score", "--rdms", &missing, "--brain", &missing, "--out", &out],
        vec!["evaluate", "--manifest", &missing],
        vec!["report", "--ledger", &missing],
    ];
    for args in cases {
        let got = rsaforge(&args);
        assert_eq!(code(&got), 1, "{args:?}\n{}", stderr(&got));
        assert!(stderr(&got).contains("missing.rdma"), "{args:?}: {}", stderr(&got));
    }
}

#[test]
fn train_zero_epochs_writes_no_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train_tiny(&run, 0);
    let files: Vec<_> = fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec![std::ffi::OsString::from(TRAIN_LOG)]);
    assert_eq!(fs::read_to_string(run.join(TRAIN_LOG)).unwrap(), "");
}

#[test]
fn train_writes_checkpoints_on_cadence_and_log() {
    let run = shared_run();
    let mut names: Vec<String> = fs::read_dir(run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["epoch_001.rdma", "epoch_005.rdma", "epoch_010.rdma", TRAIN_LOG]);

    let log = fs::read_to_string(run.join(TRAIN_LOG)).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    for (i, line) in lines.iter().enumerate() {
        let epoch = i + 1;
        assert_eq!(line["epoch"], epoch);
        assert!(line["mean_loss"].as_f64().unwrap().is_finite());
        let acc = line["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        match line.get("checkpoint_path") {
            Some(p) => {
                assert!([1, 5, 10].contains(&epoch), "epoch {epoch}");
                assert_eq!(p.as_str().unwrap(), s(&checkpoint_file(run, epoch)));
            }
            None => assert!(![1, 5, 10].contains(&epoch), "epoch {epoch}"),
        }
    }
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&a, 5);
    train_tiny(&b, 5);
    for file in ["epoch_001.rdma", "epoch_005.rdma"] {
        assert_eq!(read_bytes(&a.join(file)).unwrap(), read_bytes(&b.join(file)).unwrap(), "{file}");
    }
    // the log names its own directory, so compare the numbers only
    let numbers = |p: &Path| -> Vec<(Value, Value)> {
        fs::read_to_string(p.join(TRAIN_LOG))
            .unwrap()
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                (v["mean_loss"].clone(), v["accuracy"].clone())
            })
            .collect()
    };
    assert_eq!(numbers(&a), numbers(&b));
}

/// 92 stimuli at 16x16 from the synth verb.
fn stimuli(dir: &Path) -> PathBuf {
    let images = dir.join("stimuli.rdma");
    ok(&[
        "synth", "--stimuli", "92", "--size", "16", "--subjects", "3", "--seed", "9",
        "--images-out", &s(&images), "--brain-out", &s(&dir.join("brain.rdma")),
    ]);
    images
}

#[test]
fn extract_writes_every_tap_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let images = stimuli(dir.path());
    let ckpt = s(&checkpoint_file(shared_run(), 10));
    let extract = |out: &Path, threads: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_rsaforge"));
        cmd.args(["extract", "--checkpoint", &ckpt, "--images", &s(&images), "--input-size", "16"])
            .args(["--out", &s(out)]);
        match threads {
            Some(t) => cmd.env("RSAFORGE_THREADS", t),
            None => cmd.env_remove("RSAFORGE_THREADS"),
        };
        cmd.output().unwrap()
    };
    let first = dir.path().join("a.rdma");
    assert_eq!(code(&extract(&first, None)), 0);
    let acts = read_archive(&first).unwrap();
    let names: Vec<&str> = acts.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, TAPS);
    for (name, t) in &acts {
        assert_eq!(t.shape().len(), 2, "{name}");
        assert_eq!(t.shape()[0], 92, "{name}");
    }

    for (file, threads) in [("b.rdma", None), ("c.rdma", Some("1")), ("d.rdma", Some("3"))] {
        let again = dir.path().join(file);
        assert_eq!(code(&extract(&again, threads)), 0);
        assert_eq!(read_bytes(&again).unwrap(), read_bytes(&first).unwrap(), "{file}");
    }
    assert_eq!(code(&extract(&dir.path().join("e.rdma"), Some("0"))), 2);
}

#[test]
fn extract_rejects_unknown_tap_listing_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("acts.rdma");
    let got = rsaforge(&[
        "extract", "--checkpoint", &s(&tiny().join("checkpoint.rdma")),
        "--images", &s(&tiny().join("set_a/images.rdma")), "--input-size", "16",
        "--taps", "fc,bogus", "--out", &s(&out),
    ]);
    assert_eq!(code(&got), 2);
    let msg = stderr(&got);
    assert!(msg.contains("bogus"), "{msg}");
    for tap in TAPS {
        assert!(msg.contains(tap), "{tap} not listed: {msg}");
    }
    assert!(!out.exists());

    // a subset keeps network order
    ok(&[
        "extract", "--checkpoint", &s(&tiny().join("checkpoint.rdma")),
        "--images", &s(&tiny().join("set_a/images.rdma")), "--input-size", "16",
        "--taps", "fc,stage2", "--out", &s(&out),
    ]);
    let names: Vec<String> = read_archive(&out).unwrap().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["stage2", "fc"]);
}

#[test]
fn extract_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let images = stimuli(dir.path());
    let got = rsaforge(&[
        "extract", "--checkpoint", &s(&images), "--images", &s(&images),
        "--out", &s(&dir.path().join("acts.rdma")),
    ]);
    assert_eq!(code(&got), 1, "{}", stderr(&got));
}

#[test]
fn identical_stimuli_give_zero_dissimilarity() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<f32> = (0..6 * 5).map(|i: usize| ((i * i * 31 + i * 17) % 101) as f32).collect();
    let mut data = rows;
    let copy: Vec<f32> = data[5..10].to_vec();
    data[20..25].copy_from_slice(&copy);
    let acts = dir.path().join("acts.rdma");
    write_archive(&acts, &[("fc".into(), Tensor::new(&[6, 5], data).unwrap())]).unwrap();
    let out = dir.path().join("rdm");
    ok(&["rdm", "--activations", &s(&acts), "--out", &s(&out)]);
    let (name, m) = read_tensor(&rdm_path(&out, "fc")).unwrap();
    assert_eq!(name, "fc");
    assert_eq!(m.shape(), &[6, 6]);
    assert_eq!(m.data()[6 + 4], 0.0);
    assert_eq!(m.data()[4 * 6 + 1], 0.0);
    let off_diagonal_zeros = (0..6)
        .flat_map(|i| (0..6).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && m.data()[i * 6 + j] == 0.0)
        .count();
    assert_eq!(off_diagonal_zeros, 2);

    // running again gives the same bytes
    let again = dir.path().join("rdm2");
    ok(&["rdm", "--activations", &s(&acts), "--out", &s(&again)]);
    assert_eq!(read_bytes(&rdm_path(&again, "fc")).unwrap(), read_bytes(&rdm_path(&out, "fc")).unwrap());
}

#[test]
fn constant_activation_row_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut data: Vec<f32> = (0..4 * 3).map(|i| (i * i) as f32).collect();
    data[6..9].fill(2.5);
    let acts = dir.path().join("acts.rdma");
    write_archive(&acts, &[("stage3".into(), Tensor::new(&[4, 3], data).unwrap())]).unwrap();
    let got = rsaforge(&["rdm", "--activations", &s(&acts), "--out", &s(&dir.path().join("rdm"))]);
    assert_eq!(code(&got), 1);
    let msg = stderr(&got);
    assert!(msg.contains("stage3") && msg.contains('2'), "{msg}");
}

#[test]
fn model_identical_to_subjects_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let n = 7;
    let tri: Vec<f64> = (0..n * (n - 1) / 2).map(|k| 0.1 + 0.05 * ((k * 11) % 21) as f64).collect();
    let rdm = Rdm::from_upper_triangle(n, &tri).unwrap();
    let rdms = dir.path().join("rdm");
    fs::create_dir(&rdms).unwrap();
    rsaforge::data::write_tensor(&rdm_path(&rdms, "fc"), "fc", rdm.matrix()).unwrap();
    let brain = dir.path().join("brain.rdma");
    let sets: Vec<SubjectRdmSet> = Region::ALL
        .iter()
        .map(|&r| SubjectRdmSet::new(r, vec![rdm.clone(); 4]).unwrap())
        .collect();
    rsaforge::data::save_brain(&brain, &sets).unwrap();

    let report = dir.path().join("scores.json");
    ok(&["score", "--rdms", &s(&rdms), "--brain", &s(&brain), "--set", "same", "--out", &s(&report)]);
    let r = read_report(&report).unwrap();
    assert_eq!(r.sets.len(), 1);
    assert_eq!(r.sets[0].name, "same");
    assert_eq!(r.sets[0].regions.len(), 2);
    for region in &r.sets[0].regions {
        assert_eq!(region.layers[0].normalized_pct, 100.0, "{}", region.region);
    }
    assert_eq!(r.best_layer, "fc");

    // a brain set with a different stimulus count is refused
    let small = Rdm::from_upper_triangle(3, &[0.2, 0.4, 0.6]).unwrap();
    let sets: Vec<SubjectRdmSet> = Region::ALL
        .iter()
        .map(|&r| SubjectRdmSet::new(r, vec![small.clone(); 2]).unwrap())
        .collect();
    rsaforge::data::save_brain(&brain, &sets).unwrap();
    let got = rsaforge(&["score", "--rdms", &s(&rdms), "--brain", &s(&brain), "--out", &s(&report)]);
    assert_eq!(code(&got), 1, "{}", stderr(&got));
}

fn manifest(dir: &Path, name: &str, checkpoint: &Path) -> PathBuf {
    let set = |n: &str| {
        serde_json::json!({
            "name": n,
            "images": tiny().join(n).join("images.rdma"),
            "brain": tiny().join(n).join("brain.rdma"),
        })
    };
    let body = serde_json::json!({
        "checkpoint": checkpoint,
        "input_size": [16, 16],
        "output_dir": dir.join(format!("{name}_out")),
        "sets": [set("set_a"), set("set_b")],
    });
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&body).unwrap()).unwrap();
    path
}

/// Sample standard deviation, two-pass.
fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn evaluate_and_report_leaderboard() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.json");
    let run = shared_run();
    let label = run.file_name().unwrap().to_string_lossy().into_owned();
    for epoch in [1, 10] {
        let m = manifest(dir.path(), &format!("e{epoch}"), &checkpoint_file(run, epoch));
        let out = ok(&["evaluate", "--manifest", &s(&m), "--ledger", &s(&ledger)]);
        let line = String::from_utf8(out.stdout).unwrap();
        assert!(line.starts_with(&format!("{label} epoch {epoch}:")), "{line}");
    }
    let rows = read_ledger(&ledger).unwrap().rows;
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].model.as_str(), rows[0].epoch), (label.as_str(), 1));
    assert_eq!((rows[1].model.as_str(), rows[1].epoch), (label.as_str(), 10));

    let fixture = manifest(dir.path(), "fixture", &tiny().join("checkpoint.rdma"));
    ok(&["evaluate", "--manifest", &s(&fixture), "--ledger", &s(&ledger)]);
    let ledger_rows = read_ledger(&ledger).unwrap().rows;
    assert_eq!(ledger_rows.len(), 3);
    // appending keeps earlier rows untouched
    assert_eq!(&ledger_rows[..2], &rows[..]);

    let csv_out = ok(&["report", "--ledger", &s(&ledger)]);
    let csv_text = String::from_utf8(csv_out.stdout).unwrap();
    assert_eq!(csv_text.lines().count(), 4);
    assert_eq!(csv_text.lines().next().unwrap(), REPORT_HEADER.join(","));
    let csv_rows = parse_report_csv(&csv_text).unwrap();

    let json_path = dir.path().join("report.json");
    ok(&["report", "--ledger", &s(&ledger), "--format", "json", "--out", &s(&json_path)]);
    let json_rows: Vec<ReportRow> = serde_json::from_slice(&fs::read(&json_path).unwrap()).unwrap();
    assert_eq!(json_rows, csv_rows);

    // descending by mean, and every ledger row appears once
    for pair in csv_rows.windows(2) {
        assert!(pair[0].mean_pct >= pair[1].mean_pct);
    }
    for row in &ledger_rows {
        let found: Vec<_> = csv_rows
            .iter()
            .filter(|r| r.model == row.model && r.epoch == row.epoch)
            .collect();
        assert_eq!(found.len(), 1);
        let r = found[0];
        assert_eq!((r.evc_pct, r.it_pct, r.mean_pct), (row.evc_pct, row.it_pct, row.mean_pct));
        assert_eq!(r.mean_pct, (r.evc_pct + r.it_pct) / 2.0);
        assert_eq!(r.best_layer, row.best_layer);

        // stddev recomputed from the stored per-subject correlations
        assert_eq!(row.cells.len(), 4);
        let cells: Vec<f64> = row
            .cells
            .iter()
            .map(|c| {
                let pcts: Vec<f64> = c
                    .per_subject_r
                    .iter()
                    .map(|r| 100.0 * r * r / c.noise_ceiling_lower)
                    .collect();
                sample_std(&pcts)
            })
            .collect();
        let want = cells.iter().sum::<f64>() / cells.len() as f64;
        assert!((r.stddev - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", r.stddev);
    }
}

#[test]
fn evaluate_twice_appends_twice_with_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.json");
    let m = manifest(dir.path(), "m", &tiny().join("checkpoint.rdma"));
    ok(&["evaluate", "--manifest", &s(&m), "--ledger", &s(&ledger)]);
    let out = dir.path().join("m_out");
    let snapshot = |p: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![p.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    files.push((s(e.strip_prefix(p).unwrap()), fs::read(&e).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    let first = snapshot(&out);
    assert!(first.len() > 2 * TAPS.len());
    ok(&["evaluate", "--manifest", &s(&m), "--ledger", &s(&ledger)]);
    assert_eq!(snapshot(&out), first);
    let rows = read_ledger(&ledger).unwrap().rows;
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn evaluate_manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "m", &tiny().join("checkpoint.rdma"));
    let mut body: Value = serde_json::from_slice(&fs::read(&m).unwrap()).unwrap();
    body["taps"] = serde_json::json!(["fc", "bogus"]);
    fs::write(&m, serde_json::to_vec(&body).unwrap()).unwrap();
    let got = rsaforge(&["evaluate", "--manifest", &s(&m)]);
    assert_eq!(code(&got), 2, "{}", stderr(&got));

    body["taps"] = serde_json::json!(["fc"]);
    body["sets"][1]["brain"] = serde_json::json!(dir.path().join("gone.rdma"));
    fs::write(&m, serde_json::to_vec(&body).unwrap()).unwrap();
    let got = rsaforge(&["evaluate", "--manifest", &s(&m)]);
    assert_eq!(code(&got), 1);
    assert!(stderr(&got).contains("gone.rdma"), "{}", stderr(&got));
}

#[test]
fn report_of_empty_ledger_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    for (file, body) in [("empty.json", ""), ("rows.json", "{\"rows\": []}\n")] {
        let ledger = dir.path().join(file);
        fs::write(&ledger, body).unwrap();
        let out = ok(&["report", "--ledger", &s(&ledger)]);
        assert_eq!(String::from_utf8(out.stdout).unwrap(), format!("{}\n", REPORT_HEADER.join(",")));
        let out = ok(&["report", "--ledger", &s(&ledger), "--format", "json"]);
        let rows: Vec<ReportRow> = serde_json::from_slice(&out.stdout).unwrap();
        assert!(rows.is_empty());
    }
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{rows").unwrap();
    assert_eq!(code(&rsaforge(&["report", "--ledger", &s(&bad)])), 1);
}
