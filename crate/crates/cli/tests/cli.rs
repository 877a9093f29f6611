use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fmap_cli::{front_of, read_csv, CliError, RunConfig, RunEntry, SweepRow};
use fmap_ood::clustering::ClusterMethod;
use fmap_ood::fusion::FusionStrategy;
use fmap_ood::pipeline::{BaseMethod, MethodSpec, Model};
use fmap_ood::synth::SynthConfig;
use fmap_ood::Error;
use proptest::prelude::*;

fn fmap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fmap"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn synth(dir: &Path, name: &str, synth: SynthConfig) -> PathBuf {
    let cfg = RunConfig {
        synth,
        ..RunConfig::default()
    };
    let c = dir.join(format!("{name}.json"));
    fs::write(&c, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.join(name);
    run_ok(fmap().arg("synth").arg("--config").arg(&c).arg("--out").arg(&out));
    out.join("manifest.json")
}

fn id_world(images: usize, first_image: usize, unknown_fraction: f64) -> SynthConfig {
    SynthConfig {
        images,
        first_image,
        unknown_fraction,
        seed: 11,
        ..SynthConfig::default()
    }
}

#[test]
fn fit_writes_full_bank() {
    let d = tempfile::tempdir().unwrap();
    let fit = synth(d.path(), "fit", id_world(150, 0, 0.0));
    let out = d.path().join("o");
    run_ok(fmap().arg("fit").arg("--fit-manifest").arg(&fit).arg("--out").arg(&out));
    let model = Model::from_json(&fs::read_to_string(out.join("bank.json")).unwrap()).unwrap();
    assert_eq!(model.bank.cells.len(), 5 * 3);
    assert!(model.bank.cells.iter().all(|c| c.record.threshold.is_finite()));
    assert!(model.logits.iter().all(|l| l.global.threshold.is_finite()));
}

#[test]
fn cluster_flag_changes_centroid_count() {
    let d = tempfile::tempdir().unwrap();
    let three_blobs = SynthConfig {
        num_classes: 2,
        channels: vec![8],
        downsample_factors: vec![16],
        objects_per_image: [8, 8],
        clusters_per_cell: 3,
        mean_scale: 3.0,
        id_sigma: 0.1,
        unknown_fraction: 0.0,
        images: 40,
        seed: 5,
        ..SynthConfig::default()
    };
    let fit = synth(d.path(), "fit", three_blobs);
    let mut counts = Vec::new();
    for method in ["one", "kmeans"] {
        let out = d.path().join(method);
        run_ok(
            fmap()
                .args(["fit", "--cluster", method])
                .arg("--fit-manifest")
                .arg(&fit)
                .arg("--out")
                .arg(&out),
        );
        let model = Model::from_json(&fs::read_to_string(out.join("bank.json")).unwrap()).unwrap();
        counts.push(model.bank.cells.iter().map(|c| c.centroids.len()).collect::<Vec<_>>());
    }
    assert_eq!(counts[0], vec![1, 1]);
    assert_eq!(counts[1], vec![3, 3]);
}

#[test]
fn missing_inputs_exit_two_and_name_the_path() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("absent/manifest.json");
    let out = fmap().arg("fit").arg("--fit-manifest").arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent/manifest.json"));

    let ev = synth(d.path(), "ev", id_world(5, 0, 0.2));
    let out = fmap()
        .arg("eval")
        .arg("--eval-manifest")
        .arg(&ev)
        .arg("--out")
        .arg(d.path().join("nobank"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bank.json"));

    fs::write(d.path().join("bad.json"), "{ not json").unwrap();
    let out = fmap().arg("synth").arg("--config").arg(d.path().join("bad.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = fmap().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_values_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        confidence_thresholds: vec![0.5, 0.1],
        ..RunConfig::default()
    };
    let c = write_config(d.path(), &cfg);
    let out = fmap().arg("sweep").arg("--config").arg(&c).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn core_errors() -> Vec<Error> {
    vec![
        Error::Io {
            path: "x".into(),
            source: std::io::Error::other("x"),
        },
        Error::Format("x".into()),
        Error::Data("x".into()),
        Error::Config("x".into()),
        Error::DegenerateBox("x".into()),
        Error::InsufficientSamples { needed: 2, got: 1 },
        Error::Undefined("x".into()),
        Error::AllNoise,
        Error::Fit("x".into()),
        Error::ZeroVector,
        Error::Triplet("x".into()),
        Error::Divergence("x".into()),
        Error::DegenerateMap,
        Error::Json(serde_json::from_str::<u8>("x").unwrap_err()),
    ]
}

proptest! {
    #[test]
    fn exit_codes_by_error_class(i in 0usize..14) {
        let e = core_errors().swap_remove(i);
        let user = matches!(
            e,
            Error::Io { .. } | Error::Format(_) | Error::Data(_) | Error::Config(_) | Error::Json(_)
                | Error::Fit(_) | Error::InsufficientSamples { .. } | Error::AllNoise
                | Error::Triplet(_) | Error::DegenerateBox(_)
        );
        let code = CliError::from(e).exit_code();
        prop_assert_eq!(code, if user { 2 } else { 1 });
    }

    #[test]
    fn usage_and_internal_codes(msg in ".*") {
        prop_assert_eq!(CliError::Usage(msg.clone()).exit_code(), 2);
        prop_assert_eq!(CliError::Internal(msg).exit_code(), 1);
    }
}

fn sweep_config(dir: &Path, runs: Vec<RunEntry>, thresholds: Vec<f64>) -> PathBuf {
    let fit = synth(dir, "fit", id_world(150, 0, 0.0));
    let ev = synth(dir, "ev", id_world(60, 1000, 0.3));
    let cfg = RunConfig {
        fit_manifest: Some(fit),
        eval_manifests: vec![ev],
        runs,
        confidence_thresholds: thresholds,
        ..RunConfig::default()
    };
    write_config(dir, &cfg)
}

#[test]
fn sweep_rows_and_front_match_oracle() {
    let d = tempfile::tempdir().unwrap();
    let c = sweep_config(d.path(), vec![RunEntry::new(MethodSpec::Fmap)], vec![0.01, 0.5, 0.9]);
    let out = d.path().join("s");
    run_ok(fmap().arg("sweep").arg("--config").arg(&c).arg("--out").arg(&out));
    let rows: Vec<SweepRow> = read_csv(&out.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 3);

    let d = tempfile::tempdir().unwrap();
    let runs = vec![
        RunEntry::new(MethodSpec::Fmap),
        RunEntry::new(MethodSpec::Msp),
        RunEntry {
            cluster: Some(ClusterMethod::KMeans),
            ..RunEntry::new(MethodSpec::Fmap)
        },
        RunEntry::new(MethodSpec::Fusion {
            a: BaseMethod::Fmap,
            b: BaseMethod::Energy,
            strategy: FusionStrategy::Or,
        }),
    ];
    let c = sweep_config(d.path(), runs, vec![0.01, 0.3, 0.6, 0.9]);
    let out = d.path().join("s");
    run_ok(fmap().arg("sweep").arg("--config").arg(&c).arg("--out").arg(&out));
    let rows: Vec<SweepRow> = read_csv(&out.join("sweep.csv")).unwrap();
    let front: Vec<SweepRow> = read_csv(&out.join("front.csv")).unwrap();
    assert_eq!(rows.len(), 16);

    // O(n^2) domination check on the values read back from sweep.csv;
    // rows with an undefined coordinate never enter the front
    let valid: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.error.is_empty() && r.row.map.is_some() && r.u_f1_sum.is_some())
        .collect();
    assert!(valid.len() >= 8, "only {} comparable rows", valid.len());
    let pt = |r: &SweepRow| (r.row.map.unwrap(), r.u_f1_sum.unwrap());
    let dominated = |p: (f64, f64)| {
        valid.iter().any(|q| {
            let q = pt(q);
            q.0 >= p.0 && q.1 >= p.1 && (q.0 > p.0 || q.1 > p.1)
        })
    };
    let mut want: Vec<String> = valid
        .iter()
        .filter(|r| !dominated(pt(r)))
        .map(|r| format!("{:?}", r))
        .collect();
    let mut got: Vec<String> = front.iter().map(|r| format!("{:?}", r)).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
    assert_eq!(front_of(&rows).len(), front.len());
    let header = fs::read_to_string(out.join("front.csv")).unwrap();
    assert!(header.lines().next().unwrap().contains("A-OSE"));
}

#[test]
fn reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let c = sweep_config(
        d.path(),
        vec![RunEntry::new(MethodSpec::Fmap), RunEntry::new(MethodSpec::Odin)],
        vec![0.05, 0.5],
    );
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        run_ok(fmap().arg("fit").arg("--config").arg(&c).arg("--out").arg(out));
        run_ok(fmap().arg("eval").arg("--config").arg(&c).arg("--out").arg(out));
    }
    for f in ["bank.json", "results.csv", "report_0.05.json", "report_0.5.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn two_eval_sets_report_summed_f1() {
    let d = tempfile::tempdir().unwrap();
    let fit = synth(d.path(), "fit", id_world(150, 0, 0.0));
    let ood = synth(d.path(), "ood", id_world(30, 2000, 1.0));
    let mix = synth(d.path(), "mix", id_world(30, 3000, 0.3));
    let cfg = RunConfig {
        fit_manifest: Some(fit),
        eval_manifests: vec![ood, mix],
        confidence_thresholds: vec![0.05],
        ..RunConfig::default()
    };
    let c = write_config(d.path(), &cfg);
    let out = d.path().join("o");
    run_ok(fmap().arg("fit").arg("--config").arg(&c).arg("--out").arg(&out));
    run_ok(fmap().arg("eval").arg("--config").arg(&c).arg("--out").arg(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report_0.05.json")).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    let f1: f64 = runs.iter().map(|r| r["report"]["u_f1"].as_f64().unwrap()).sum();
    assert!((report["u_f1_sum"][0].as_f64().unwrap() - f1).abs() < 1e-12);
    // the unknown-only set has no known ground truth
    assert!(runs[0]["report"]["map_known"].is_null());
}
