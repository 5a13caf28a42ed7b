use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dida_core::encoder::Encoder;
use dida_core::scene::{connected_components, read_image};

fn dida(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dida"))
        .args(args)
        .output()
        .expect("run dida")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn gen(dir: &Path, count: usize, extra: &[&str]) {
    let count = count.to_string();
    let mut args = vec!["gen", "--out", s(dir), "--count", &count, "--seed", "4"];
    args.extend_from_slice(extra);
    let out = dida(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const SMALL_ENCODER: [&str; 4] = ["--widths", "4,8,8,8", "--feature-dim", "8"];

fn train(data: &Path, ckpt: &Path, report: &Path, steps: &str) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--steps",
        steps,
        "--batch-size",
        "4",
        "--eval-interval",
        "2",
        "--out",
        s(ckpt),
        "--report",
        s(report),
    ];
    args.extend_from_slice(&SMALL_ENCODER);
    dida(&args)
}

#[test]
fn gen_single_scene_writes_exactly_three_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    gen(&dir, 1, &[]);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["image_0.ppm", "manifest.tsv", "mask_0.pgm"]);
    let manifest = fs::read_to_string(dir.join("manifest.tsv")).unwrap();
    assert_eq!(manifest, "0\timage_0.ppm\tmask_0.pgm\n");
    assert!(fs::read_to_string(dir.join("image_0.ppm")).unwrap().starts_with("P3\n32 32\n255"));
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 4, &[]);
    gen(&b, 4, &[]);
    for name in ["manifest.tsv", "image_0.ppm", "mask_3.pgm", "image_3.ppm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn gen_two_objects_gives_two_components() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 8, &["--objects", "2..2"]);
    for i in 0..8 {
        let mask = read_image(tmp.path().join(format!("mask_{i}.pgm"))).unwrap();
        assert_eq!(connected_components(&mask), 2, "scene {i}");
    }
}

#[test]
fn gen_rejects_invalid_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dida(&["gen", "--out", s(tmp.path()), "--objects", "3..1"]);
    assert_eq!(code(&out), 1);
    let out = dida(&["gen", "--out", s(tmp.path()), "--objects", "1..5"]);
    assert_eq!(code(&out), 1);
    let out = dida(&["gen", "--out", s(tmp.path()), "--sizes", "7..40"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&dida(&["gen", "--out", "x", "--bogus", "1"])), 1);
    assert_eq!(code(&dida(&["frobnicate"])), 1);
    assert_eq!(code(&dida(&["train"])), 1);
    assert_eq!(code(&dida(&["gen", "--count", "many", "--out", "x"])), 1);
    assert_eq!(code(&dida(&["--help"])), 0);
}

#[test]
fn config_file_layers_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.cfg");
    fs::write(&cfg, format!("# dataset\nout={}\ncount=2\nseed=9\n", s(&tmp.path().join("d")))).unwrap();
    let out = dida(&["gen", "--config", s(&cfg), "--count", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("count=3"), "{err}");
    assert!(err.contains("seed=9"), "{err}");
    assert!(err.contains("size=32"), "{err}");
    assert!(tmp.path().join("d/image_2.ppm").exists());

    fs::write(&cfg, "count=2\ncolour=red\n").unwrap();
    let out = dida(&["gen", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn thread_cap_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_dida"))
        .args(["gen", "--out", "unused"])
        .env("DIDA_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dida"))
        .args(["gen", "--out", s(tmp.path()), "--count", "2"])
        .env("DIDA_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn train_one_step_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 10, &[]);
    let (ckpt, report) = (tmp.path().join("c.bin"), tmp.path().join("r.csv"));
    let out = train(&data, &ckpt, &report, "1");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(Encoder::load(&ckpt).is_ok());
    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,dida_loss,contrastive_loss,mean_iou");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
}

#[test]
fn train_report_has_row_per_eval_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 10, &[]);
    let run = |tag: &str| {
        let (ckpt, report) = (tmp.path().join(format!("{tag}.bin")), tmp.path().join(format!("{tag}.csv")));
        let out = train(&data, &ckpt, &report, "5");
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        (fs::read(ckpt).unwrap(), fs::read_to_string(report).unwrap())
    };
    let (ca, ra) = run("a");
    let (cb, rb) = run("b");
    assert_eq!(ca, cb);
    assert_eq!(ra, rb);
    let steps: Vec<&str> = ra.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "2", "4", "5"]);
}

#[test]
fn train_rejects_missing_data_and_zero_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, report) = (tmp.path().join("c.bin"), tmp.path().join("r.csv"));
    assert_eq!(code(&train(&tmp.path().join("none"), &ckpt, &report, "2")), 2);
    gen(tmp.path(), 3, &[]);
    assert_eq!(code(&train(tmp.path(), &ckpt, &report, "0")), 1);
}

fn attend(out_prefix: &Path, mode: &str, golden: Option<&Path>) -> Output {
    let g = golden_dir();
    let mut args = vec![
        "attend".to_string(),
        "--ckpt".into(),
        s(&g.join("ckpt.bin")).into(),
        "--image".into(),
        s(&g.join("scene.ppm")).into(),
        "--mask".into(),
        s(&g.join("mask.pgm")).into(),
        "--mode".into(),
        mode.into(),
        "--out".into(),
        s(out_prefix).into(),
    ];
    if let Some(dir) = golden {
        args.push("--golden".into());
        args.push(s(dir).into());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dida(&refs)
}

#[test]
fn attend_writes_valid_maps_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let prefix = tmp.path().join("m");
    let out = attend(&prefix, "threshold", None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for suffix in ["raw", "soft", "seeds"] {
        let path = tmp.path().join(format!("m_{suffix}.pgm"));
        let map = read_image(&path).unwrap();
        assert_eq!(map.shape(), &[32, 32]);
        assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let seeds = read_image(tmp.path().join("m_seeds.pgm")).unwrap();
    for v in seeds.data() {
        let code = (v * 255.0).round() as u8;
        assert!([0, 128, 255].contains(&code), "{code}");
    }
}

#[test]
fn attend_matches_golden_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in ["dot", "threshold"] {
        let out = attend(&tmp.path().join(mode), mode, Some(&golden_dir()));
        assert_eq!(code(&out), 0, "{mode}: {}", stderr(&out));
        assert!(stdout(&out).contains("golden outputs match"));
    }
}

#[test]
fn attend_detects_golden_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let fake = tmp.path().join("golden");
    fs::create_dir(&fake).unwrap();
    for suffix in ["raw", "soft", "seeds"] {
        fs::copy(golden_dir().join(format!("dot_{suffix}.pgm")), fake.join(format!("dot_{suffix}.pgm"))).unwrap();
    }
    let mut bytes = fs::read(fake.join("dot_raw.pgm")).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'0' { b'1' } else { b'0' };
    fs::write(fake.join("dot_raw.pgm"), bytes).unwrap();
    let out = attend(&tmp.path().join("x"), "dot", Some(&fake));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("differs from golden"));
}

#[test]
fn attend_rejects_size_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 1, &["--size", "16", "--sizes", "4..6"]);
    let g = golden_dir();
    let out = dida(&[
        "attend",
        "--ckpt",
        s(&g.join("ckpt.bin")),
        "--image",
        s(&tmp.path().join("image_0.ppm")),
        "--mask",
        s(&tmp.path().join("mask_0.pgm")),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(code(&out), 2);
}

fn parse_eval_csv(path: &Path) -> (Vec<f64>, f64) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,iou"));
    let mut rows = Vec::new();
    let mut mean = None;
    for line in lines {
        let (k, v) = line.split_once(',').unwrap();
        if k == "mean" {
            mean = Some(v.parse().unwrap());
        } else {
            assert_eq!(k.parse::<usize>().unwrap(), rows.len());
            rows.push(v.parse().unwrap());
        }
    }
    (rows, mean.expect("mean line"))
}

#[test]
fn eval_oracle_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 6, &[]);
    let csv = tmp.path().join("e.csv");
    let out = dida(&["eval", "--oracle", "--data", s(tmp.path()), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (rows, mean) = parse_eval_csv(&csv);
    assert_eq!(rows, vec![1.0; 6]);
    assert_eq!(mean, 1.0);
    assert_eq!(stdout(&out).trim(), "mean,1");
}

#[test]
fn eval_mean_is_row_mean() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 7, &[]);
    let csv = tmp.path().join("e.csv");
    let ckpt = golden_dir().join("ckpt.bin");
    let out = dida(&["eval", "--ckpt", s(&ckpt), "--data", s(tmp.path()), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (rows, mean) = parse_eval_csv(&csv);
    assert_eq!(rows.len(), 7);
    let recomputed = rows.iter().sum::<f64>() / rows.len() as f64;
    assert!((mean - recomputed).abs() <= 1e-12 * recomputed.abs().max(1.0));
}

#[test]
fn eval_rejects_empty_and_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("e.csv");
    fs::write(tmp.path().join("manifest.tsv"), "").unwrap();
    let out = dida(&["eval", "--oracle", "--data", s(tmp.path()), "--out", s(&csv)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
    let out = dida(&["eval", "--oracle", "--data", s(&tmp.path().join("no")), "--out", s(&csv)]);
    assert_eq!(code(&out), 2);
    let out = dida(&["eval", "--data", s(tmp.path()), "--out", s(&csv)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_tiny_passes_quickly_and_names_suites() {
    let start = Instant::now();
    let out = dida(&["gradcheck", "--size", "tiny", "--tol", "1e-4"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(code(&out), 0, "{}\n{}", stdout(&out), stderr(&out));
    let report = stdout(&out);
    assert!(report.contains("dida_forward"), "{report}");
    assert!(report.contains("all suites passed"));
}

#[test]
fn gradcheck_zero_tolerance_fails() {
    let out = dida(&["gradcheck", "--tol", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).contains("FAIL"));
}
