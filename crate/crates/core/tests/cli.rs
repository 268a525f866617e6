use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asppnet::data::files::{read_pgm, write_ten1};
use asppnet::data::nifti::NiftiWriteOptions;
use asppnet::data::{read_manifest, write_nifti, NiftiData, Ten1};
use asppnet::harness::RunReport;
use asppnet::model::checkpoint;
use asppnet::optim::cosine_lr;
use asppnet::{ModelSpec, Network, Variant};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_asppnet"));
    c.env_remove("ASPPNET_OUTPUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--set",
    "model.depth=2",
    "--set",
    "model.base_channels=4",
    "--set",
    "model.image_size=16",
    "--set",
    "data.synth_count=16",
    "--set",
    "data.split=[8,4,4]",
];

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--epochs", "many"]).status.code(), Some(1));
    let o = run(&["train", "--set", "train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.nonsense"));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("train.epochs"));

    std::fs::write(&cfg, r#"{"train.epochs": 0, "train.seed": 4}"#).unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--config", s(&cfg), "--epochs", "1", "--output-dir", s(&out)];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = RunReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config["train.epochs"], 1);
    assert_eq!(report.config["train.seed"], 4);
}

#[test]
fn train_is_deterministic_and_reports_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--epochs", "3", "--batch-size", "4", "--seed", "11", "--output-dir", s(&out)];
        args.extend(TINY);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        for f in ["best.ckpt", "last.ckpt", "report.json", "report.txt", "test_metrics.csv"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        reports.push(RunReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap());
    }
    let (a, b) = (&reports[0], &reports[1]);
    let bits = |r: &RunReport| r.loss_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a), bits(b));
    assert_eq!(a.lr_trace.len(), 3);
    for (t, lr) in a.lr_trace.iter().enumerate() {
        assert!((lr - cosine_lr(0.0, 1e-3, t as f64, 3.0)).abs() < 1e-12);
    }
    assert!(a.timings.note.contains("hardware-dependent"));
    assert!(a.version.starts_with("asppnet "));
    let back = asppnet::harness::RunConfig::from_flat(&a.config).unwrap();
    assert_eq!(back.seed, 11);
    assert_eq!(back.model.image_size, 16);
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env_run");
    let mut args = vec!["train", "--epochs", "1"];
    args.extend(TINY);
    let o = bin().args(&args).env("ASPPNET_OUTPUT_DIR", &out).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("report.json").is_file());
}

#[test]
fn diverging_run_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "3", "--lr", "1e30", "--output-dir", s(dir.path())];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("epoch") && err.contains("step"), "{err}");
}

fn files_in(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        entries.sort();
        for p in entries {
            let rel = p.strip_prefix(dir).unwrap().to_path_buf();
            out.push((rel, std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = run(&["synth", "--count", "25", "--seed", seed, "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let fa = files_in(&a);
    assert_eq!(fa, files_in(&b));
    assert_ne!(fa, files_in(&c));
    assert_eq!(read_manifest(&a.join("manifest.tsv")).unwrap().len(), 25);
    let ten = fa.iter().find(|(p, _)| p.extension().is_some_and(|e| e == "ten")).unwrap();
    assert_eq!(ten.1.len(), 16 + 4 * 64 * 64);
}

#[test]
fn synth_250_gives_250_manifest_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--count", "250", "--size", "16", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).count(), 250);
}

fn write_volume(path: &Path, dims: &[usize], data: NiftiData) {
    std::fs::write(path, write_nifti(dims, &data, &NiftiWriteOptions::default()).unwrap()).unwrap();
}

#[test]
fn slices_from_brats_shaped_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let (nx, ny, nz) = (240, 240, 155);
    let n = nx * ny * nz;
    let image: Vec<u8> = (0..n).map(|i| (i % 251) as u8).collect();
    let mut label = vec![0u8; n];
    for y in 100..120 {
        for x in 90..130 {
            label[(70 * ny + y) * nx + x] = 1;
        }
    }
    for x in 0..10 {
        label[(20 * ny + 5) * nx + x] = 2;
    }
    let (img, lab) = (dir.path().join("case_t1c.nii"), dir.path().join("case_seg.nii"));
    write_volume(&img, &[nx, ny, nz], NiftiData::U8(image));
    write_volume(&lab, &[nx, ny, nz], NiftiData::U8(label));

    let all = dir.path().join("all");
    let o = run(&["slices", "--image", s(&img), "--label", s(&lab), "--out", s(&all)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let entries = read_manifest(&all.join("manifest.tsv")).unwrap();
    assert_eq!(entries.len(), 155);
    assert!(entries[70].id.ends_with("_z070"));
    let mask = read_pgm(&entries[70].mask).unwrap();
    assert_eq!((mask.width, mask.height), (240, 240));
    assert_eq!(mask.pixels.iter().filter(|&&p| p > 0).count(), 20 * 40);

    let best = dir.path().join("best");
    let o = run(&["slices", "--image", s(&img), "--label", s(&lab), "--out", s(&best), "--policy", "max-tumor"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let entries = read_manifest(&best.join("manifest.tsv")).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].id, "case_t1c_z070");
}

#[test]
fn corrupt_nifti_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.nii");
    let mut bytes = write_nifti(&[4, 4, 2], &NiftiData::F32(vec![0.0; 32]), &NiftiWriteOptions::default()).unwrap();
    bytes[344] = b'x';
    std::fs::write(&p, &bytes).unwrap();
    let o = run(&["slices", "--image", s(&p), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("344"), "{}", stderr(&o));

    std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    bytes[344] = b'n';
    std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    let o = run(&["slices", "--image", s(&p), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("expected"), "{}", stderr(&o));
}

fn save_net(dir: &Path, variant: Variant) -> PathBuf {
    let spec = ModelSpec { base_channels: 2, ..ModelSpec::new(variant) };
    let net = Network::<f32>::build(&spec, 1).unwrap();
    let p = dir.join(format!("{variant}.ckpt"));
    checkpoint::save(&p, &net, None).unwrap();
    p
}

#[test]
fn predict_writes_masks_and_attention_maps() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("slice.ten");
    let data: Vec<f32> = (0..64 * 64).map(|i| ((i % 64) as f32 / 63.0).powi(2)).collect();
    write_ten1(&img, &Ten1::F32 { shape: vec![64, 64], data }).unwrap();
    let aspp = save_net(dir.path(), Variant::AttUnetAspp);
    let out = dir.path().join("pred");
    let o = run(&["predict", "--checkpoint", s(&aspp), "--out", s(&out), "--attention", s(&img)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mask = read_pgm(&out.join("slice_mask.pgm")).unwrap();
    assert_eq!((mask.width, mask.height), (64, 64));
    assert!(mask.pixels.iter().all(|&p| p == 0 || p == 255));
    let sizes: Vec<usize> = (1..=4).map(|k| read_pgm(&out.join(format!("slice_alpha{k}.pgm"))).unwrap().width).collect();
    assert_eq!(sizes, vec![8, 16, 32, 64]);
    assert!(!out.join("slice_alpha5.pgm").exists());

    let unet = save_net(dir.path(), Variant::Unet);
    let o = run(&["predict", "--checkpoint", s(&unet), "--out", s(&out), "--attention", s(&img)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("attention"));
    let o = run(&["predict", "--checkpoint", s(&unet), "--out", s(&out), s(&img)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn eval_lists_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["synth", "--count", "126", "--out", s(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let ckpt = save_net(dir.path(), Variant::AttUnet);
    let out = dir.path().join("eval");
    let manifest = data.join("manifest.tsv");
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--output-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("eval_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 127);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("126 samples"));

    let o = run(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.ckpt"));
}

#[test]
fn gradcheck_command_lists_layers() {
    let o = run(&["gradcheck", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    for layer in ["conv2d", "matmul_1x1", "batch", "attention", "aspp", "spp", "bilinear", "loss"] {
        assert!(table.to_lowercase().contains(layer), "{layer} missing from\n{table}");
    }
    assert!(table.contains("all "));
}
