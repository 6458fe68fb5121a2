use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdrforge::dataset::{self, save_scene};
use hdrforge::io;
use hdrforge::synth::{self, SceneConfig};
use hdrforge::RgbImage;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hdrforge"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_scene(dir: &Path, name: &str, w: usize, h: usize, seed: u64) -> PathBuf {
    let cfg = SceneConfig {
        width: w,
        height: h,
        noise_std: 0.002,
        ..SceneConfig::default()
    };
    let scene = synth::scene(name, &cfg, seed).unwrap();
    let d = dir.join(name);
    save_scene(&d, &scene).unwrap();
    d
}

fn count(out: &str, label: &str) -> usize {
    out.lines()
        .find_map(|l| l.strip_prefix(label))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| panic!("no '{label}' in {out}"))
}

fn tiny_config(dir: &Path, iterations: u64, interval: u64) -> PathBuf {
    let path = dir.join("config.json");
    let json = format!(
        r#"{{"variant":"resnet","k":3,"learning_rate":0.001,"batch_size":2,"iterations":{iterations},
            "seed":7,"mu":5000.0,"gamma":2.2,"checkpoint_interval":{interval},
            "width_divisor":16,"residual_blocks":1}}"#
    );
    std::fs::write(&path, json).unwrap();
    path
}

fn prepared_store(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    small_scene(&data, "a", 64, 64, 1);
    let store = dir.join("store.bin");
    let o = run(&[
        "prepare",
        p(&data),
        "-o",
        p(&store),
        "--patch-size",
        "32",
        "--stride",
        "32",
        "--no-align",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    store
}

#[test]
fn prepare_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_scene(&data, "a", 96, 64, 1);
    let store = dir.path().join("s.bin");
    let o = run(&[
        "prepare",
        p(&data),
        "-o",
        p(&store),
        "--patch-size",
        "32",
        "--stride",
        "16",
        "--oversample-factor",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(count(&out, "scenes:"), 1);
    // 5 x 3 grid
    assert_eq!(count(&out, "raw patches:"), 15);
    assert_eq!(count(&out, "after augmentation:"), 120);
    assert_eq!(count(&out, "after oversampling:"), 120);
    assert_eq!(dataset::load_store(&store).unwrap().len(), 120);

    let o = run(&[
        "prepare",
        p(&data),
        "-o",
        p(&store),
        "--patch-size",
        "32",
        "--stride",
        "16",
        "--no-augment",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(
        count(&out, "after augmentation:"),
        count(&out, "raw patches:")
    );
}

#[test]
fn prepare_skips_incomplete_scenes_and_fails_when_empty() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let broken = small_scene(&data, "broken", 64, 64, 2);
    std::fs::remove_file(broken.join("gt.hdr")).unwrap();
    let store = dir.path().join("s.bin");
    let o = run(&[
        "prepare",
        p(&data),
        "-o",
        p(&store),
        "--patch-size",
        "32",
        "--no-align",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gt.hdr"), "{}", stderr(&o));

    small_scene(&data, "good", 64, 64, 3);
    let o = run(&[
        "prepare",
        p(&data),
        "-o",
        p(&store),
        "--patch-size",
        "32",
        "--no-align",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(count(&stdout(&o), "scenes:"), 1);
}

#[test]
fn prepare_honours_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_scene(&data, "a", 64, 64, 1);
    small_scene(&data, "b", 64, 64, 2);
    let split = dir.path().join("split.json");
    std::fs::write(&split, r#"{"train": ["b"], "test": ["a"]}"#).unwrap();
    let store = dir.path().join("s.bin");
    let o = run(&[
        "prepare",
        p(&data),
        "-o",
        p(&store),
        "--split",
        p(&split),
        "--patch-size",
        "32",
        "--stride",
        "32",
        "--no-align",
        "--no-augment",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = dataset::load_store(&store).unwrap();
    assert!(recs.iter().all(|r| r.provenance.starts_with("b@")));
}

#[test]
fn zero_iterations_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let store = prepared_store(dir.path());
    let cfg = tiny_config(dir.path(), 0, 10);
    let out = dir.path().join("run");
    let o = run(&["train", p(&store), "-c", p(&cfg), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = hdrforge::net::load_checkpoint(&out.join("latest.ckpt")).unwrap();
    assert_eq!(ckpt.network.spec().k_inputs, 3);
    assert_eq!(ckpt.optimizer.unwrap().step, 0);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = prepared_store(dir.path());

    let full = dir.path().join("full");
    let cfg = tiny_config(dir.path(), 6, 3);
    assert!(run(&["train", p(&store), "-c", p(&cfg), "-o", p(&full)])
        .status
        .success());

    let split = dir.path().join("split");
    let cfg = tiny_config(dir.path(), 3, 3);
    assert!(run(&["train", p(&store), "-c", p(&cfg), "-o", p(&split)])
        .status
        .success());
    let cfg = tiny_config(dir.path(), 6, 3);
    let resume = split.join("latest.ckpt");
    let o = run(&[
        "train",
        p(&store),
        "-c",
        p(&cfg),
        "-o",
        p(&split),
        "--resume",
        p(&resume),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let losses = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("train_log.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
            .collect()
    };
    let (a, b) = (losses(&full), losses(&split));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
}

#[test]
fn corrupt_store_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let store = prepared_store(dir.path());
    let bytes = std::fs::read(&store).unwrap();
    std::fs::write(&store, &bytes[..bytes.len() - 5]).unwrap();
    let cfg = tiny_config(dir.path(), 0, 10);
    let o = run(&[
        "train",
        p(&store),
        "-c",
        p(&cfg),
        "-o",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));
}

fn initial_checkpoint(dir: &Path) -> PathBuf {
    let store = prepared_store(dir);
    let cfg = tiny_config(dir, 0, 10);
    let out = dir.join("run");
    assert!(run(&["train", p(&store), "-c", p(&cfg), "-o", p(&out)])
        .status
        .success());
    out.join("latest.ckpt")
}

#[test]
fn merge_preserves_dimensions_and_writes_extras() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = initial_checkpoint(dir.path());
    let scene = small_scene(&dir.path().join("m"), "s", 50, 37, 5);
    let out = dir.path().join("out.hdr");
    let png = dir.path().join("preview.png");
    let raw = dir.path().join("out.f32");
    let o = run(&[
        "merge",
        p(&scene.join("input_1.tif")),
        p(&scene.join("input_2.tif")),
        p(&scene.join("input_3.tif")),
        "-e",
        p(&scene.join("exposures.txt")),
        "-c",
        p(&ckpt),
        "-o",
        p(&out),
        "--tonemap",
        p(&png),
        "--raw",
        p(&raw),
        "--tile",
        "32",
        "--overlap",
        "8",
        "--context",
        "8",
        "--no-align",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hdr = io::read_hdr(&out).unwrap();
    assert_eq!(hdr.dims(), (37, 50));
    assert_eq!(io::read_ldr(&png).unwrap().dims(), (37, 50));
    assert_eq!(std::fs::metadata(&raw).unwrap().len(), 50 * 37 * 3 * 4);
}

#[test]
fn merge_two_frames_with_low_reference() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = initial_checkpoint(dir.path());
    let scene = small_scene(&dir.path().join("m"), "s", 32, 32, 6);
    let exposures = dir.path().join("two.txt");
    std::fs::write(&exposures, "-2\n0\n").unwrap();
    let out = dir.path().join("out.hdr");
    let o = run(&[
        "merge",
        p(&scene.join("input_1.tif")),
        p(&scene.join("input_2.tif")),
        "-e",
        p(&exposures),
        "-c",
        p(&ckpt),
        "-o",
        p(&out),
        "--reference",
        "0",
        "--no-align",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(io::read_hdr(&out).unwrap().dims(), (32, 32));

    // four frames cannot fill three slots
    let four = dir.path().join("four.txt");
    std::fs::write(&four, "-2\n0\n2\n4\n").unwrap();
    let f = p(&scene.join("input_1.tif")).to_string();
    let o = run(&[
        "merge",
        &f,
        &f,
        &f,
        &f,
        "-e",
        p(&four),
        "-c",
        p(&ckpt),
        "-o",
        p(&out),
        "--no-align",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

fn noisy(img: &RgbImage, amp: f64) -> RgbImage {
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let u = (x >> 11) as f64 / (1u64 << 53) as f64;
            (v + amp * (u - 0.5)).clamp(0.0, 1.0)
        })
        .collect();
    RgbImage::from_vec(img.width(), img.height(), data).unwrap()
}

#[test]
fn eval_reports_rows_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = (dir.path().join("pred"), dir.path().join("truth"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    for (i, name) in ["a", "b", "c"].iter().enumerate() {
        let gt = synth::radiance_map(40, 30, 1e-2, i as u64);
        io::write_hdr(&truth.join(format!("{name}.hdr")), &gt).unwrap();
        let stored = io::read_hdr(&truth.join(format!("{name}.hdr"))).unwrap();
        let pr = if *name == "b" {
            noisy(&stored, 0.05)
        } else {
            stored
        };
        io::write_hdr(&pred.join(format!("{name}.hdr")), &pr).unwrap();
    }
    io::write_hdr(
        &pred.join("orphan.hdr"),
        &synth::radiance_map(40, 30, 1e-2, 9),
    )
    .unwrap();
    let report = dir.path().join("report.csv");
    let o = run(&["eval", p(&pred), p(&truth), "-o", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("orphan"));

    let text = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<(String, Vec<f64>)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            let name = f.next().unwrap().to_string();
            (name, f.map(|v| v.parse().unwrap()).collect())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    let get = |n: &str| &rows.iter().find(|r| r.0 == n).unwrap().1;
    for clean in ["a", "c"] {
        assert_eq!(get(clean)[0], 99.0);
        assert!((get(clean)[1] - 1.0).abs() < 1e-9);
        for j in 0..4 {
            assert!(get("b")[j] < get(clean)[j]);
        }
    }
    for j in 0..4 {
        let mean = (get("a")[j] + get("b")[j] + get("c")[j]) / 3.0;
        assert!((get("mean")[j] - mean).abs() < 1e-5);
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["merge", "--variant", "x"]).status.code(), Some(1));
    assert_eq!(
        run(&["train", "s.bin", "-o", "x", "--variant", "vgg"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = bin()
        .args(["eval", "a", "b"])
        .env("HDRFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
