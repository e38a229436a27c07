use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rcnet::dataio::{load_cloud, load_dataset_dir, save_cloud, Label, LabeledCloud, PointCloud, Split};
use rcnet::gradcheck::micro_setup;
use rcnet::model::{predict_proba, RcNet};
use rcnet_cli::exit;
use tempfile::TempDir;

fn rcnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rcnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    rcnet(dir, args).status.code().unwrap()
}

/// Small and fast everywhere: tiny clouds, narrow layers.
const TINY: &[&str] = &[
    "--set", "n_points=64",
    "--set", "r=8",
    "--set", "s=8",
    "--set", "hidden=8",
    "--set", "stn_point_widths=8,16",
    "--set", "stn_fc_widths=8",
    "--set", "conv_widths=8,16",
    "--set", "fc_widths=16",
    "--set", "batch_size=8",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = with(&["generate-synth", "--out", name, "--set", "train_per_class=10", "--set", "test_per_class=5"], TINY);
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(name)
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
}

#[test]
fn generate_synth_writes_counted_reproducible_splits() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "a", &[]);
    let b = synth(tmp.path(), "b", &[]);
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(value(&manifest, "train_count"), "40");
    assert_eq!(value(&manifest, "test_count"), "20");
    assert_eq!(manifest.lines().filter(|l| l.starts_with("file = ")).count(), 60);
    // class histogram agrees with a recount of the files
    let train = load_dataset_dir::<f32>(&a, Split::Train).unwrap();
    let recount: Vec<String> = train.class_histogram().iter().map(usize::to_string).collect();
    assert_eq!(value(&manifest, "train_histogram"), recount.join(","));
    assert!(a.join("config.txt").exists());
    // same seed, same bytes (the echo differs only in its out path)
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<_> { v.into_iter().filter(|(p, _)| p != Path::new("config.txt")).collect() };
    assert_eq!(strip(files_under(&a)), strip(files_under(&b)));
    let c = synth(tmp.path(), "c", &["--seed", "2"]);
    assert_ne!(strip(files_under(&a)), strip(files_under(&c)));
}

#[test]
fn training_is_reproducible_and_zero_epochs_is_initialization() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "ds", &[]);
    let train = |out: &str, epochs: &str| {
        let mut args = with(&["train", "--deterministic", "--seed", "4", "--out", out, "--set", "data=ds", "--set"], &[]);
        let e = format!("epochs={epochs}");
        args.push(&e);
        args.extend_from_slice(TINY);
        ok(d, &args);
    };
    train("r0", "0");
    let init = RcNet::<f32>::load(d.join("r0/model.rck")).unwrap();
    let fresh = RcNet::<f32>::new(init.config.clone()).unwrap();
    assert_eq!(init.to_bytes(), fresh.to_bytes());
    assert_eq!(fs::read_to_string(d.join("r0/metrics.csv")).unwrap().lines().count(), 1);

    train("r1", "3");
    train("r2", "3");
    let csv = fs::read_to_string(d.join("r1/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(fs::read(d.join("r1/model.rck")).unwrap(), fs::read(d.join("r2/model.rck")).unwrap());
    assert_eq!(csv, fs::read_to_string(d.join("r2/metrics.csv")).unwrap());
    let echo = fs::read_to_string(d.join("r1/config.txt")).unwrap();
    assert_eq!(value(&echo, "deterministic"), "true");
    assert_eq!(value(&echo, "num_labels"), "4");
}

#[test]
fn eval_reports_fit_and_rejects_bad_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "ds", &[]);
    // the desk model fits this small set quickly
    ok(d, &["train", "--out", "run", "--set", "data=ds", "--set", "epochs=10", "--set", "batch_size=8"]);
    let args = ["eval", "--out", "ev", "--set", "data=ds", "--set", "eval_split=train", "--checkpoint", "run/model.rck"];
    let first = ok(d, &args);
    assert_eq!(value(&first, "accuracy"), "1", "{first}");
    assert_eq!(ok(d, &args), first);
    assert_eq!(fs::read_to_string(d.join("ev/report.txt")).unwrap(), first);

    let mut bytes = fs::read(d.join("run/model.rck")).unwrap();
    bytes[0] = b'X';
    fs::write(d.join("bad.rck"), &bytes).unwrap();
    assert_eq!(code(d, &["eval", "--set", "data=ds", "--checkpoint", "bad.rck"]), exit::VALIDATION);
    // head/label mismatch against the data
    synth(d, "seg", &["--set", "classes=lamp,table"]);
    assert_eq!(code(d, &["eval", "--set", "data=seg", "--checkpoint", "run/model.rck"]), exit::VALIDATION);
}

#[test]
fn predict_is_permutation_invariant_and_matches_library() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "ds", &[]);
    ok(d, &with(&["train", "--out", "run", "--set", "data=ds", "--set", "epochs=1"], TINY));
    let cloud = load_cloud::<f32>(d.join("ds/test/00003.pcv")).unwrap();
    let n = cloud.cloud.len();
    let perm: Vec<usize> = (0..n).map(|k| (k * 37 + 11) % n).collect();
    save_cloud(&cloud.select(&perm), d.join("perm.pcv")).unwrap();
    let a = ok(d, &["predict", "--out", "p1", "--checkpoint", "run/model.rck", "--input", "ds/test/00003.pcv"]);
    let b = ok(d, &["predict", "--out", "p2", "--checkpoint", "run/model.rck", "--input", "perm.pcv"]);
    assert_eq!(a, b);
    assert_eq!(fs::read_to_string(d.join("p1/predictions.txt")).unwrap(), a);

    let model = RcNet::<f32>::load(d.join("run/model.rck")).unwrap();
    let probs = predict_proba(&model.logits(&[&cloud.cloud]).unwrap());
    let printed: Vec<f32> = a.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
    assert_eq!(printed, probs.data());

    // segmentation: one line per point
    synth(d, "seg", &["--set", "classes=torus-spokes,lamp"]);
    ok(d, &with(&["train", "--out", "segrun", "--set", "data=seg", "--set", "epochs=1", "--set", "seg_point_widths=8", "--set", "seg_fc_widths=16"], TINY));
    let seg_cloud = load_cloud::<f32>(d.join("seg/test/00000.pcv")).unwrap();
    let text = ok(d, &["predict", "--checkpoint", "segrun/model.rck", "--input", "seg/test/00000.pcv", "--out", "sp"]);
    assert_eq!(text.lines().count(), seg_cloud.cloud.len());
    assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 1 + 5);
}

#[test]
fn dump_beams_table() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let origin = LabeledCloud::new(PointCloud::from_points(&[[0.0f32, 0.0, 0.0]]).unwrap(), Label::Class(0), 1, None).unwrap();
    save_cloud(&origin, d.join("origin.pcv")).unwrap();
    let t = ok(d, &["dump-beams", "--input", "origin.pcv", "--set", "r=32", "--set", "s=32", "--out", "o"]);
    assert_eq!(t, "17 17 1 0\n");

    synth(d, "ds", &[]);
    let cloud = load_cloud::<f32>(d.join("ds/test/00001.pcv")).unwrap();
    let n = cloud.cloud.len();
    let table = ok(d, &["dump-beams", "--input", "ds/test/00001.pcv", "--out", "b1"]);
    let occupancy: usize = table.lines().map(|l| l.split(' ').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(occupancy, n);
    assert_eq!(fs::read_to_string(d.join("b1/beams.txt")).unwrap(), table);

    // permuted input: same table once indices are mapped back
    let perm: Vec<usize> = (0..n).rev().collect();
    save_cloud(&cloud.select(&perm), d.join("perm.pcv")).unwrap();
    let moved = ok(d, &["dump-beams", "--input", "perm.pcv", "--out", "b2"]);
    let mapped: String = moved
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            let idx: Vec<String> = f[3..].iter().map(|k| perm[k.parse::<usize>().unwrap()].to_string()).collect();
            format!("{} {} {} {}\n", f[0], f[1], f[2], idx.join(" "))
        })
        .collect();
    assert_eq!(mapped, table);

    ok(d, &with(&["train", "--out", "run", "--set", "data=ds", "--set", "epochs=1"], TINY));
    ok(d, &with(&["dump-beams", "--input", "ds/test/00001.pcv", "--checkpoint", "run/model.rck", "--out", "fm"], TINY));
    assert_eq!(fs::read(d.join("fm/feature_map.bin")).unwrap().len(), 8 * 8 * 8 * 4);
}

#[test]
fn gradcheck_passes_lists_tensors_and_catches_corruption() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let report = ok(d, &["gradcheck", "--out", "gc"]);
    assert!(report.starts_with("gradcheck ") && report.lines().next().unwrap().ends_with("result=pass"));
    let (model, _, _) = micro_setup(1).unwrap();
    for id in model.store.trainable_ids() {
        let name = model.store.name(id);
        assert!(report.lines().any(|l| l.starts_with(&format!("{name} "))), "{name} missing");
    }
    let out = rcnet(d, &["gradcheck", "--out", "gc2", "--corrupt", "cls.out.b"]);
    assert_eq!(out.status.code(), Some(exit::CHECK_FAILED));
    assert!(String::from_utf8_lossy(&out.stderr).contains("worst: cls.out.b"));
}

#[test]
fn error_families_have_distinct_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["train", "--set", "colour=red"]), exit::CONFIG);
    assert_eq!(code(d, &["train", "--precision", "16"]), exit::CONFIG);
    assert_eq!(code(d, &["train"]), exit::CONFIG);
    assert_eq!(code(d, &["frobnicate"]), exit::USAGE);
    fs::write(d.join("junk.pcv"), b"PCV1 but not really").unwrap();
    assert_eq!(code(d, &["dump-beams", "--input", "junk.pcv"]), exit::DATA);
    synth(d, "ds", &[]);
    assert_eq!(code(d, &["train", "--out", "x", "--set", "data=ds", "--set", "num_labels=3"]), exit::VALIDATION);
    let diverge = with(&["train", "--out", "dv", "--set", "data=ds", "--set", "epochs=3", "--set", "lr=1e30"], TINY);
    assert_eq!(code(d, &diverge), exit::DIVERGENCE);
}

#[test]
fn double_precision_and_ensembles() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "ds", &[]);
    ok(d, &with(&["train", "--precision", "64", "--out", "r64", "--set", "data=ds", "--set", "epochs=1"], TINY));
    assert_eq!(value(&fs::read_to_string(d.join("r64/config.txt")).unwrap(), "precision"), "64");
    ok(d, &with(&["train", "--out", "ens", "--set", "data=ds", "--set", "epochs=1", "--set", "ensemble=true"], TINY));
    for k in 0..3 {
        assert!(d.join(format!("ens/metrics_member{k}.csv")).exists());
    }
    let report = ok(d, &["eval", "--out", "ee", "--set", "data=ds", "--checkpoint", "ens/ensemble.txt"]);
    assert_eq!(value(&report, "samples"), "20");
    let pred = ok(d, &["predict", "--out", "ep", "--checkpoint", "ens/ensemble.txt", "--input", "ds/test/00000.pcv"]);
    assert_eq!(pred.lines().count(), 1);
}

#[test]
fn experiment_tables() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let small: Vec<&str> = with(
        &["--set", "train_per_class=6", "--set", "test_per_class=3", "--set", "epochs=1", "--set", "seeds=1,2"],
        TINY,
    );

    let csv = ok(d, &with(&["experiment", "beam-size", "--out", "bs", "--set", "beam_sizes=4,8"], &small));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beams,rcnet_acc,baseline_acc");
    assert_eq!(lines.len(), 1 + 2);
    assert!(lines[1].starts_with("4x4,") && lines[2].starts_with("8x8,"));
    assert_eq!(fs::read_to_string(d.join("bs/beam_size.csv")).unwrap(), csv);

    let csv = ok(d, &with(&["experiment", "dropout", "--out", "dp"], &small));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,model,acc_64,acc_32,acc_16,acc_8");
    assert_eq!(lines.len(), 1 + 4);

    let mut args = with(&["experiment", "ensemble", "--out", "en"], &small);
    args.extend(["--set", "seeds=1"]);
    let csv = ok(d, &args);
    assert_eq!(csv.lines().next().unwrap(), "seed,acc_x,acc_y,acc_z,acc_ensemble");
    assert_eq!(csv.lines().count(), 2);

    // each ablation row is reproduced by evaluating the saved variant
    let csv = ok(d, &with(&["experiment", "ablation", "--out", "ab"], &small));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 + 1);
    for row in &rows[..2] {
        let seed = row[0];
        for (encoder, col) in [("gru", 1), ("mlp", 2)] {
            let data = format!("data=ab/ablation/seed{seed}_data");
            let ckpt = format!("ab/ablation/seed{seed}_{encoder}.rck");
            let report = ok(d, &["eval", "--out", "abev", "--set", &data, "--checkpoint", &ckpt]);
            assert_eq!(value(&report, "accuracy"), row[col], "seed {seed} {encoder}");
        }
    }
}
