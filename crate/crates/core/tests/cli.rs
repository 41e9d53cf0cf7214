mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{brute_boundary, random_blob_mask, rng};
use geoseg::data::read_volume;
use geoseg::geometry::BinaryMask;
use geoseg::harness::{mid_slice, weight_to_pixel, write_mask, ABLATION_HEADER, ABLATION_MODES, SWEEP_HEADER};
use geoseg::training::TrainConfig;

const TINY: &[&str] = &["--t-max", "2", "--width", "4", "--depth", "2", "--crop", "32x32"];

fn geoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = geoseg(args);
    assert!(
        out.status.success(),
        "geoseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build(dir: &Path, counts: [&str; 3]) {
    ok(&[
        "build-data", "--out", s(dir), "--seed", "4", "--shape", "32x32",
        "--labeled", counts[0], "--unlabeled", counts[1], "--test", counts[2],
    ]);
}

fn data_rows(csv: &str) -> Vec<Vec<&str>> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').collect()).collect()
}

#[test]
fn build_data_writes_every_record_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let msg = ok(&["build-data", "--out", s(&data), "--labeled", "4", "--unlabeled", "36", "--test", "10", "--shape", "32x32"]);
    assert!(msg.contains("50 records"), "{msg}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 50);

    let again = geoseg(&["build-data", "--out", s(&data), "--shape", "32x32"]);
    assert!(!again.status.success());
    let err = String::from_utf8(again.stderr).unwrap();
    assert!(err.starts_with("error[exists]: "), "{err}");
    assert_eq!(err.lines().count(), 1);
    ok(&["build-data", "--out", s(&data), "--shape", "32x32", "--force"]);
}

#[test]
fn train_writes_snapshot_and_eval_reads_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    build(&data, ["1", "2", "2"]);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", s(&data), "--out", s(&run), "--seed", "3"];
    args.extend_from_slice(TINY);
    ok(&args);
    let snap = TrainConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    let paper = TrainConfig::desk();
    assert_eq!(snap.loss, paper.loss);
    assert_eq!((snap.lr, snap.momentum, snap.lr_decay), (0.01, 0.9, 0.1));
    assert_eq!((snap.seed, snap.network.seed, snap.t_max), (3, 3, 2));
    assert!(snap.deterministic);
    assert!(run.join("losses.csv").exists() && run.join("summary.json").exists());

    let refused = geoseg(&args);
    assert!(!refused.status.success());

    let eval = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoints/final.ckpt")), "--manifest", s(&data), "--out", s(&eval)]);
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "case_id,dice,jaccard,asd,hd95,degenerate_flag");
    assert_eq!(data_rows(&csv).len(), 2);
    let agg: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(agg["cases"], 2);
}

#[test]
fn ablate_emits_every_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    build(&data, ["1", "2", "1"]);
    let out = dir.path().join("ablation");
    let mut args = vec!["ablate", "--manifest", s(&data), "--out", s(&out), "--seeds", "0,1,2"];
    args.extend_from_slice(TINY);
    ok(&args);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), ABLATION_HEADER);
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 5 * 3 + 5);
    for (i, mode) in ABLATION_MODES.iter().enumerate() {
        for seed in 0..3 {
            let r = &rows[i * 3 + seed];
            assert_eq!((r[0], r[1]), (mode.as_str(), seed.to_string().as_str()));
        }
        assert_eq!((rows[15 + i][0], rows[15 + i][1]), (mode.as_str(), "mean"));
    }
    for r in &rows {
        assert_eq!(r.len(), 6);
        for cell in &r[2..] {
            assert!(cell.parse::<f64>().is_ok() || *cell == "undefined", "{cell}");
        }
    }
}

#[test]
fn sweep_writes_one_row_per_rho() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    build(&data, ["1", "2", "1"]);
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep-rho", "--manifest", s(&data), "--out", s(&out)];
    args.extend_from_slice(TINY);
    ok(&args);
    let csv = fs::read_to_string(out.join("sweep_rho.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), SWEEP_HEADER);
    let rhos: Vec<&str> = data_rows(&csv).iter().map(|r| r[0]).collect();
    assert_eq!(rhos, ["1", "1.5", "2", "2.5", "3"]);
    let cfg = TrainConfig::from_toml(&fs::read_to_string(out.join("rho_2.5/seed_0/config.toml")).unwrap()).unwrap();
    assert_eq!(cfg.loss.rho, 2.5);
}

#[test]
fn export_maps_from_mask() {
    let dir = tempfile::tempdir().unwrap();
    let mask = random_blob_mask(&[24, 20, 6], &mut rng(5));
    let mask_path = dir.path().join("mask.json");
    write_mask(&mask_path, &mask).unwrap();
    let out = dir.path().join("maps");
    ok(&["export-maps", "--mask", s(&mask_path), "--out", s(&out)]);
    let index: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("maps.json")).unwrap()).unwrap();
    let means: Vec<f64> = index.iter().map(|m| m["mean_weight"].as_f64().unwrap()).collect();
    assert_eq!(means.len(), 3);
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");

    let boundary = brute_boundary(&mask);
    for rho in ["1", "2", "3"] {
        let sub = out.join(format!("rho_{rho}"));
        let w = match read_volume(&sub.join("weights.json")).unwrap().data {
            geoseg::data::VolumeData::Float32(v) => v,
            other => panic!("unexpected {other:?}"),
        };
        for (v, &b) in w.iter().zip(&boundary) {
            assert_eq!(*v == 1.0, b);
        }
        let pgm = fs::read(sub.join("weights_mid.pgm")).unwrap();
        let (rows, cols, slice) = mid_slice(&[24, 20, 6], &w);
        let header = format!("P5\n{cols} {rows}\n255\n");
        assert!(pgm.starts_with(header.as_bytes()));
        let rho: f64 = rho.parse().unwrap();
        let pixels: Vec<u8> = slice.iter().map(|&v| weight_to_pixel(v, rho)).collect();
        assert_eq!(&pgm[header.len()..], pixels.as_slice());
    }
}

#[test]
fn export_maps_needs_a_source() {
    let out = geoseg(&["export-maps", "--out", "/nonexistent/maps"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[invalid_argument]: "), "{err}");
}

#[test]
fn errors_are_single_categorized_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = geoseg(&["train", "--manifest", s(&dir.path().join("missing")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[io]: "), "{err}");
    assert_eq!(err.lines().count(), 1);

    let bad = geoseg(&["train", "--manifest", "x", "--crop", "30x30", "--out", s(&dir.path().join("r2"))]);
    let err = String::from_utf8(bad.stderr).unwrap();
    assert!(err.starts_with("error[config]: ") || err.starts_with("error[shape]: "), "{err}");
}

#[test]
fn empty_mask_export_is_degenerate_but_written() {
    let dir = tempfile::tempdir().unwrap();
    let mask_path = dir.path().join("m.json");
    write_mask(&mask_path, &BinaryMask::zeros(vec![16, 16])).unwrap();
    ok(&["export-maps", "--mask", s(&mask_path), "--out", s(&dir.path().join("maps")), "--rho", "2"]);
}
