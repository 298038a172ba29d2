use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use gjeval_core::cli::{run, Cli, CliError, Outputs};
use gjeval_core::report::REPORT_SCHEMA;
use serde_json::Value;

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("gjeval").chain(args.iter().copied())).unwrap()
}

fn run_args(args: &[&str]) -> Result<Outputs, CliError> {
    run(&cli(args))
}

fn ok(args: &[&str]) -> Outputs {
    let out = run_args(args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    out.write_all().unwrap();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(out: &Outputs) -> Value {
    let (_, bytes) = out
        .files
        .iter()
        .find(|(p, _)| p.file_name().unwrap() == "report.json")
        .expect("report.json");
    serde_json::from_slice(bytes).unwrap()
}

fn file_map(out: &Outputs, root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    out.files
        .iter()
        .map(|(p, b)| (p.strip_prefix(root).unwrap().to_path_buf(), b.clone()))
        .collect()
}

fn validate(v: &Value) {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

/// Synthetic predictions plus a matching reader file.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let p = dir.join("p.csv");
    let r = dir.join("r.csv");
    ok(&[
        "synth", "--patients", "12,8,10", "--images-max", "6", "--seed", "3", "--out", s(&p),
        "--readers-out", s(&r), "--readers-per-group", "3",
    ]);
    (p, r)
}

const PRED_HEADER: &str = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n";

#[test]
fn every_report_validates_against_schema() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let (p, r) = fixture(d);
    let q = d.join("q.csv");
    ok(&["synth", "--patients", "12,8,10", "--images-max", "6", "--seed", "3", "--sep", "1", "--out", s(&q)]);

    let mut reports = Vec::new();
    for level in ["image", "patient", "weighted"] {
        reports.push(report(&ok(&["evaluate", "--pred", s(&p), "--level", level, "--out", s(&d.join(level))])));
    }
    reports.push(report(&ok(&[
        "evaluate", "--pred", s(&p), "--sex", "female", "--out", s(&d.join("female")),
    ])));
    reports.push(report(&ok(&[
        "compare", "--pred-a", s(&p), "--pred-b", s(&q), "--bootstrap", "50", "--out", s(&d.join("cmp")),
    ])));
    reports.push(report(&ok(&["compare", "--pred-a", s(&p), "--pred-b", s(&p), "--out", s(&d.join("self"))])));
    reports.push(report(&ok(&["readers", "--pred", s(&p), "--readers", s(&r), "--out", s(&d.join("rd"))])));
    reports.push(report(&ok(&["kfold", "--pred", s(&p), "--k", "3", "--out", s(&d.join("kf"))])));
    reports.push(report(&ok(&["kfold", "--pred", s(&p), "--by", "image", "--out", s(&d.join("kfi"))])));
    reports.push(report(&ok(&[
        "fusion-demo", "--dim", "6", "--hidden", "3", "--samples", "200", "--epochs", "2", "--batch", "32",
        "--grad-check", "--out", s(&d.join("fd")),
    ])));
    for r in &reports {
        validate(r);
    }
    let commands: Vec<&str> = reports.iter().map(|r| r["command"].as_str().unwrap()).collect();
    for c in ["evaluate", "compare", "readers", "kfold", "fusion-demo"] {
        assert!(commands.contains(&c));
    }
}

#[test]
fn schema_rejects_malformed_report() {
    let t = tempfile::tempdir().unwrap();
    let (p, _) = fixture(t.path());
    let mut v = report(&ok(&["evaluate", "--pred", s(&p), "--out", s(&t.path().join("e"))]));
    v["report"]["kappa"] = Value::from(1.5);
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    assert!(!jsonschema::is_valid(&schema, &v));
}

#[test]
fn outputs_identical_across_reruns_and_thread_counts() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let (p, r) = fixture(d);
    let q = d.join("q.csv");
    ok(&["synth", "--patients", "12,8,10", "--seed", "9", "--images-max", "6", "--sep", "1", "--out", s(&q)]);
    let runs: Vec<Vec<String>> = vec![
        vec!["evaluate", "--pred", s(&p), "--level", "weighted", "--svg"],
        vec!["compare", "--pred-a", s(&p), "--pred-b", s(&q), "--bootstrap", "64"],
        vec!["readers", "--pred", s(&p), "--readers", s(&r)],
        vec!["kfold", "--pred", s(&p), "--k", "4"],
        vec!["fusion-demo", "--dim", "6", "--hidden", "3", "--samples", "300", "--epochs", "3", "--batch", "16"],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for args in runs {
        let mut seen = Vec::new();
        for threads in ["1", "4", "4"] {
            let out_dir = d.join(format!("{}-{}", args[0], seen.len()));
            let mut full: Vec<&str> = vec!["--threads", threads];
            full.extend(args.iter().map(String::as_str));
            full.extend(["--out", s(&out_dir)]);
            seen.push(file_map(&ok(&full), &out_dir));
        }
        assert_eq!(seen[0], seen[1], "{}", args[0]);
        assert_eq!(seen[1], seen[2], "{}", args[0]);
    }
}

#[test]
fn stamp_adds_timestamp_only_on_request() {
    let t = tempfile::tempdir().unwrap();
    let (p, _) = fixture(t.path());
    let plain = report(&ok(&["evaluate", "--pred", s(&p), "--out", s(&t.path().join("a"))]));
    let stamped = report(&ok(&["--stamp", "evaluate", "--pred", s(&p), "--out", s(&t.path().join("b"))]));
    assert!(plain.get("generated_at_unix").is_none());
    assert!(stamped["generated_at_unix"].as_u64().unwrap() > 0);
    assert_eq!(plain["config_hash"], stamped["config_hash"]);
}

#[test]
fn perfect_one_hot_predictions() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("p.csv");
    ok(&["synth", "--sep", "inf", "--out", s(&p)]);
    let v = report(&ok(&["evaluate", "--pred", s(&p), "--out", s(&t.path().join("e"))]));
    assert_eq!(v["report"]["overall"]["accuracy"]["value"], 1.0);
    assert_eq!(v["report"]["auc_micro"], 1.0);
}

#[test]
fn weighted_equals_image_level_with_one_image_per_patient() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("p.csv");
    ok(&["synth", "--images-min", "1", "--images-max", "1", "--sep", "1", "--out", s(&p)]);
    let img = report(&ok(&["evaluate", "--pred", s(&p), "--out", s(&t.path().join("i"))]));
    let w = report(&ok(&["evaluate", "--pred", s(&p), "--level", "weighted", "--out", s(&t.path().join("w"))]));
    let mut a = img["report"].clone();
    let mut b = w["report"].clone();
    a["level"] = Value::Null;
    b["level"] = Value::Null;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn missing_file_exits_1_without_outputs() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_gjeval"))
        .args(["evaluate", "--pred", s(&t.path().join("nope.csv")), "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&status.stderr).is_empty());
    assert!(!out.exists());
}

#[test]
fn malformed_file_exits_1() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("bad.csv");
    fs::write(&p, format!("{PRED_HEADER}i1,p1,A-EGJA,0.5,x,0.5\n")).unwrap();
    let err = run_args(&["evaluate", "--pred", s(&p), "--out", s(&t.path().join("o"))]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn binary_writes_outputs_and_summary() {
    let t = tempfile::tempdir().unwrap();
    let (p, _) = fixture(t.path());
    let out = t.path().join("ev");
    let res = Command::new(env!("CARGO_BIN_EXE_gjeval"))
        .args(["evaluate", "--pred", s(&p), "--out", s(&out)])
        .output()
        .unwrap();
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stdout).contains("accuracy="));
    for f in ["report.json", "cm.csv", "roc_micro.csv", "pr_micro.csv", "roc_aegja.csv", "pr_control.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn strict_mode_degeneracy_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("p.csv");
    // no E-EGJA images: its sensitivity is undefined
    fs::write(
        &p,
        format!("{PRED_HEADER}i1,p1,A-EGJA,0.8,0.1,0.1\ni2,p2,control,0.1,0.1,0.8\ni3,p3,control,0.6,0.2,0.2\n"),
    )
    .unwrap();
    let lax = run_args(&["evaluate", "--pred", s(&p), "--out", s(&t.path().join("a"))]).unwrap();
    assert!(!report(&lax)["report"]["warnings"].as_array().unwrap().is_empty());
    let err = run_args(&["--strict", "evaluate", "--pred", s(&p), "--out", s(&t.path().join("b"))]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn compare_with_itself() {
    let t = tempfile::tempdir().unwrap();
    let (p, _) = fixture(t.path());
    let v = report(&ok(&["compare", "--pred-a", s(&p), "--pred-b", s(&p), "--out", s(&t.path().join("c"))]));
    assert_eq!(v["kappa_between"], 1.0);
    for test in v["tests"].as_array().unwrap() {
        let name = test["name"].as_str().unwrap();
        if name.starts_with("McNemar") || name.starts_with("DeLong") {
            assert_eq!(test["p"], 1.0, "{name}");
        }
    }
    assert_eq!(v["join"]["only_a"], 0);
}

#[test]
fn compare_independent_random_predictors() {
    use rand::{Rng, SeedableRng};
    let t = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let labels = ["A-EGJA", "E-EGJA", "control"];
    let mut files = Vec::new();
    let truths: Vec<usize> = (0..5000).map(|_| rng.random_range(0..3)).collect();
    for name in ["a.csv", "b.csv"] {
        let mut text = String::from(PRED_HEADER);
        for (i, &y) in truths.iter().enumerate() {
            let w: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let z: f64 = w.iter().sum();
            text.push_str(&format!("i{i},p{i},{},{},{},{}\n", labels[y], w[0] / z, w[1] / z, w[2] / z));
        }
        let path = t.path().join(name);
        fs::write(&path, text).unwrap();
        files.push(path);
    }
    let v = report(&ok(&[
        "compare", "--pred-a", s(&files[0]), "--pred-b", s(&files[1]), "--class", "aegja", "--out",
        s(&t.path().join("c")),
    ]));
    assert!(v["kappa_between"].as_f64().unwrap().abs() < 0.05, "{}", v["kappa_between"]);
    let delong: Vec<_> = v["tests"].as_array().unwrap().iter().filter(|t| t["name"].as_str().unwrap().starts_with("DeLong")).collect();
    assert_eq!(delong.len(), 1);
}

#[test]
fn compare_disjoint_ids_is_empty_join() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a.csv");
    let b = t.path().join("b.csv");
    fs::write(&a, format!("{PRED_HEADER}i1,p1,A-EGJA,0.8,0.1,0.1\n")).unwrap();
    fs::write(&b, format!("{PRED_HEADER}j1,p1,A-EGJA,0.8,0.1,0.1\n")).unwrap();
    let err = run_args(&["compare", "--pred-a", s(&a), "--pred-b", s(&b), "--out", s(&t.path().join("c"))]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("empty join"));
}

/// Reader file in which every reader copies the model's argmax.
fn copy_model_readers(pred: &Path, readers: usize, with_time: bool) -> String {
    let text = fs::read_to_string(pred).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = String::from(if with_time {
        "reader_id,group,arm,image_id,pred_label,elapsed_s\n"
    } else {
        "reader_id,group,arm,image_id,pred_label\n"
    });
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    for group in ["trainee", "expert"] {
        for k in 0..readers {
            for row in &rows {
                let p: Vec<f64> = (3..6).map(|i| row[i].parse().unwrap()).collect();
                let best = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                let label = ["A-EGJA", "E-EGJA", "control"][best];
                let time = if with_time { format!(",{}", 2 + k) } else { String::new() };
                out.push_str(&format!("{group}-{k},{group},A,{},{label}{time}\n", &row[0]));
            }
        }
    }
    out
}

#[test]
fn readers_identical_to_model() {
    let t = tempfile::tempdir().unwrap();
    let (p, _) = fixture(t.path());
    let r = t.path().join("copy.csv");
    fs::write(&r, copy_model_readers(&p, 3, true)).unwrap();
    let v = report(&ok(&["readers", "--pred", s(&p), "--readers", s(&r), "--out", s(&t.path().join("rd"))]));
    let model_acc = v["model"]["overall"]["accuracy"]["value"].as_f64().unwrap();
    for g in v["groups"].as_array().unwrap() {
        assert_eq!(g["report"]["overall"]["accuracy"]["value"].as_f64().unwrap(), model_acc);
        let kappa = g["model_vs_group"].as_array().unwrap().iter().find(|t| t["name"].as_str().unwrap().starts_with("Kappa")).unwrap();
        assert_eq!(kappa["detail"]["kappa"], 1.0);
        assert_eq!(g["mean_elapsed_s"], 3.0);
        assert!(g["report"]["time_cost_s"].is_number());
    }
    for gk in v["group_kappa"].as_array().unwrap() {
        assert_eq!(gk["kappa"], 1.0);
    }
}

#[test]
fn readers_pooled_count_and_missing_time() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("p.csv");
    // 914 single-image patients
    ok(&["synth", "--patients", "400,200,314", "--images-min", "1", "--images-max", "1", "--out", s(&p)]);
    let r = t.path().join("r.csv");
    fs::write(&r, copy_model_readers(&p, 5, false)).unwrap();
    let out = ok(&["readers", "--pred", s(&p), "--readers", s(&r), "--out", s(&t.path().join("rd"))]);
    let v = report(&out);
    for g in v["groups"].as_array().unwrap() {
        assert_eq!(g["report"]["n"], 4570.0);
        assert_eq!(g["observations"], 4570);
        assert!(g.get("mean_elapsed_s").is_none());
        assert!(g["report"].get("time_cost_s").is_none());
    }
    let points = out.files.iter().find(|(p, _)| p.ends_with("reader_points.csv")).unwrap();
    // model + 10 readers, three classes each, plus the header
    assert_eq!(String::from_utf8_lossy(&points.1).lines().count(), 1 + 3 * 11);
}

#[test]
fn readers_dangling_image_is_input_error() {
    let t = tempfile::tempdir().unwrap();
    let (p, _) = fixture(t.path());
    let r = t.path().join("r.csv");
    fs::write(&r, "reader_id,group,arm,image_id,pred_label\nx,expert,A,nope,control\n").unwrap();
    let err = run_args(&["readers", "--pred", s(&p), "--readers", s(&r), "--out", s(&t.path().join("o"))]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn kfold_patients_stay_in_one_fold() {
    let t = tempfile::tempdir().unwrap();
    let (p, _) = fixture(t.path());
    let out = ok(&["kfold", "--pred", s(&p), "--k", "5", "--out", s(&t.path().join("kf"))]);
    let folds = out.files.iter().find(|(p, _)| p.ends_with("folds.csv")).unwrap();
    let mut fold_of: BTreeMap<String, String> = BTreeMap::new();
    for line in String::from_utf8_lossy(&folds.1).lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let prev = fold_of.insert(f[1].to_string(), f[2].to_string());
        assert!(prev.is_none() || prev.as_deref() == Some(f[2]));
    }
    let v = report(&out);
    let sizes: Vec<u64> = v["fold_sizes"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(sizes.iter().sum::<u64>(), 30);
}

#[test]
fn fusion_demo_epochs_zero_matches_initial_head() {
    use gjeval_core::fusion::{forward, make_toy_data, HeadDims, HeadParams, ToySpec};
    let t = tempfile::tempdir().unwrap();
    let out = ok(&[
        "fusion-demo", "--dim", "6", "--hidden", "3", "--samples", "200", "--epochs", "0", "--seed", "5",
        "--out", s(&t.path().join("fd")),
    ]);
    let dims = HeadDims { c: 6, c_res: 12, hidden: 3 };
    let init = HeadParams::init(dims, 0.1, 5).unwrap();
    let params = out.files.iter().find(|(p, _)| p.ends_with("params.json")).unwrap();
    assert_eq!(HeadParams::from_json(std::str::from_utf8(&params.1).unwrap()).unwrap(), init);

    let data = make_toy_data(&ToySpec { dims, samples: 200, seed: 5, ..ToySpec::default() }).unwrap();
    let correct = data
        .test
        .iter()
        .filter(|(b, y)| {
            let p = forward(b, &init, None).unwrap().probs;
            (0..3).fold(0, |m, k| if p[k] > p[m] { k } else { m }) == *y
        })
        .count();
    let v = report(&out);
    let acc = v["report"]["overall"]["accuracy"]["value"].as_f64().unwrap();
    assert!((acc - correct as f64 / data.test.len() as f64).abs() < 1e-12);
    assert_eq!(v["steps"], 0);
}

#[test]
fn fusion_demo_grad_check_and_divergence() {
    let t = tempfile::tempdir().unwrap();
    let out = run_args(&[
        "fusion-demo", "--dim", "4", "--hidden", "2", "--samples", "100", "--epochs", "1", "--grad-check",
        "--out", s(&t.path().join("a")),
    ])
    .unwrap();
    assert!(out.summary.contains("max relative error"));
    let v = report(&out);
    assert!(v["grad_check"]["max_rel_err"].as_f64().unwrap() < 1e-4);

    let err = run_args(&[
        "fusion-demo", "--dim", "4", "--hidden", "2", "--samples", "100", "--epochs", "5", "--lr", "1e300",
        "--out", s(&t.path().join("b")),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("step"));
}

#[test]
fn fusion_demo_reads_feature_file() {
    let t = tempfile::tempdir().unwrap();
    let f = t.path().join("features.csv");
    let mut text = String::from("id,label,dino_0,dino_1,res_0,res_1,res_2\n");
    let labels = ["A-EGJA", "E-EGJA", "control"];
    for i in 0..60 {
        let y = i % 3;
        let c = y as f64 * 2.0 - 2.0;
        text.push_str(&format!("s{i},{},{c},{},{},{c},{}\n", labels[y], -c, c * 0.5, (i % 7) as f64 * 0.01));
    }
    fs::write(&f, text).unwrap();
    let out = ok(&["fusion-demo", "--features", s(&f), "--epochs", "2", "--batch", "8", "--out", s(&t.path().join("fd"))]);
    let v = report(&out);
    validate(&v);
    assert_eq!(v["dims"]["c"], 2);
    assert_eq!(v["dims"]["c_res"], 3);
    assert_eq!(v["test_samples"], 12);
    assert_eq!(v["inputs"][0]["role"], "features");
}
