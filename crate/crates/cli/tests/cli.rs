use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lan_core::data::{load_image, save_image, write_raw, BayerPattern, BitDepth, RawFrame};
use lan_core::metrics::MetricReport;
use lan_core::network::save;
use lan_core::train::StepRecord;
use lan_core::{build_lan, LanConfig, Tensor};
use tempfile::TempDir;

fn lan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn lan")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lan(dir, args);
    assert!(
        out.status.success(),
        "lan {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn steps(log: &str) -> Vec<StepRecord> {
    log.lines().filter_map(StepRecord::parse).collect()
}

const TINY: &[&str] = &["--preset", "tiny", "--seed", "5"];

fn train_tiny(dir: &Path, out: &str, epochs: &str) -> String {
    let mut args = TINY.to_vec();
    args.extend([
        "train",
        "--out",
        out,
        "--epochs",
        epochs,
        "--synth-count",
        "1",
        "--synth-size",
        "16",
    ]);
    ok(dir, &args)
}

#[test]
fn two_step_run_logs_two_loss_lines() {
    let tmp = TempDir::new().unwrap();
    let log = train_tiny(tmp.path(), "run", "2");
    let recs = steps(&log);
    assert_eq!(recs.len(), 2, "{log}");
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2]);
    assert!(recs
        .iter()
        .all(|r| r.total.is_finite() && r.l1.is_some_and(|v| v > 0.0)));
    assert!(tmp.path().join("run/model.lan").is_file());
    assert!(tmp.path().join("run/config.txt").is_file());
}

#[test]
fn learning_rate_drops_to_a_tenth_at_half_point() {
    let tmp = TempDir::new().unwrap();
    let recs = steps(&train_tiny(tmp.path(), "run", "4"));
    let lrs: Vec<f64> = recs.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, [1e-4, 1e-4, 1e-5, 1e-5]);
}

#[test]
fn same_seed_gives_identical_checkpoint() {
    let tmp = TempDir::new().unwrap();
    train_tiny(tmp.path(), "a", "2");
    train_tiny(tmp.path(), "b", "2");
    let a = fs::read(tmp.path().join("a/model.lan")).unwrap();
    let b = fs::read(tmp.path().join("b/model.lan")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn saved_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let first = train_tiny(tmp.path(), "a", "2");
    let again = ok(tmp.path(), &["--config", "a/config.txt", "train", "--out", "b"]);
    assert_eq!(steps(&first), steps(&again));
    assert_eq!(
        fs::read(tmp.path().join("a/model.lan")).unwrap(),
        fs::read(tmp.path().join("b/model.lan")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(tmp.path().join("a/config.txt")).unwrap(),
        fs::read_to_string(tmp.path().join("b/config.txt")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    train_tiny(tmp.path(), "a", "2");
    let log = ok(
        tmp.path(),
        &[
            "--config",
            "a/config.txt",
            "train",
            "--out",
            "b",
            "--epochs",
            "3",
            "--set",
            "train.lr=0.001",
        ],
    );
    let recs = steps(&log);
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0].lr, 1e-3);
}

#[test]
fn train_rejects_missing_dirs_and_bad_overrides() {
    let tmp = TempDir::new().unwrap();
    let out = lan(
        tmp.path(),
        &["train", "--out", "r", "--input-dir", "nope", "--gt-dir", "nope"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    let out = lan(tmp.path(), &["train", "--out", "r", "--set", "train.epochs"]);
    assert!(!out.status.success());
    let out = lan(tmp.path(), &["train", "--out", "r", "--epochs", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn infer_keeps_extent_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    train_tiny(d, "run", "1");
    ok(
        d,
        &["--seed", "2", "synth", "--out", "ds", "--count", "1", "--size", "20"],
    );
    let input = "ds/low/0000.png";
    ok(
        d,
        &[
            "infer",
            "--model",
            "run/model.lan",
            "--input",
            input,
            "--output",
            "a.png",
        ],
    );
    ok(
        d,
        &[
            "infer",
            "--model",
            "run/model.lan",
            "--input",
            input,
            "--output",
            "b.png",
        ],
    );
    let out = load_image(&d.join("a.png")).unwrap();
    assert_eq!(out.shape(), &[3, 20, 20]);
    assert_eq!(fs::read(d.join("a.png")).unwrap(), fs::read(d.join("b.png")).unwrap());
    ok(
        d,
        &[
            "infer",
            "--model",
            "run/model.lan",
            "--input",
            input,
            "--output",
            "c.png",
            "--bit-depth",
            "16",
        ],
    );
    assert!(lan(
        d,
        &[
            "infer",
            "--model",
            "run/model.lan",
            "--input",
            input,
            "--output",
            "x.png",
            "--bit-depth",
            "12"
        ]
    )
    .status
    .code()
    .is_some_and(|c| c != 0));
}

#[test]
fn raw_frame_becomes_double_resolution_png() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let model = build_lan::<f32>(&LanConfig::preset("desk-bayer").unwrap()).unwrap();
    save(&model, &d.join("bayer.lan")).unwrap();
    let frame = RawFrame {
        mosaic: Tensor::from_fn(vec![1, 16, 16], |i| (512 + (i[1] * 16 + i[2]) * 13 % 200) as f32),
        black_level: 512.0,
        white_level: 16383.0,
        exposure_ratio: 100.0,
        pattern: BayerPattern::Rggb,
    };
    write_raw(&frame, &d.join("frame.raw")).unwrap();
    ok(
        d,
        &[
            "infer",
            "--model",
            "bayer.lan",
            "--input",
            "frame.raw",
            "--output",
            "out.png",
        ],
    );
    assert_eq!(load_image(&d.join("out.png")).unwrap().shape(), &[3, 16, 16]);
}

#[test]
fn bayer_model_trains_on_raw_directories() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("raw")).unwrap();
    fs::create_dir_all(d.join("gt")).unwrap();
    for k in 0..2usize {
        let frame = RawFrame {
            mosaic: Tensor::from_fn(vec![1, 32, 32], |i| (600 + (i[1] * 7 + i[2] * 3 + k * 11) % 150) as f32),
            black_level: 512.0,
            white_level: 16383.0,
            exposure_ratio: 100.0,
            pattern: BayerPattern::Rggb,
        };
        write_raw(&frame, &d.join(format!("raw/{k}.raw"))).unwrap();
        let gt = Tensor::<f32>::from_fn(vec![3, 32, 32], |i| ((i[0] + i[1] + i[2] + k) % 9) as f32 / 9.0);
        save_image(&gt, &d.join(format!("gt/{k}.png")), BitDepth::Eight).unwrap();
    }
    let log = ok(
        d,
        &[
            "--preset",
            "desk-bayer",
            "train",
            "--out",
            "run",
            "--epochs",
            "1",
            "--patch-size",
            "8",
            "--input-dir",
            "raw",
            "--gt-dir",
            "gt",
        ],
    );
    assert_eq!(steps(&log).len(), 2);
    let csv = ok(
        d,
        &[
            "eval",
            "--model",
            "run/model.lan",
            "--input-dir",
            "raw",
            "--gt-dir",
            "gt",
        ],
    );
    let report = MetricReport::parse_csv(&csv).unwrap();
    assert_eq!(
        report.rows.iter().map(|r| r.path.as_str()).collect::<Vec<_>>(),
        ["0.raw", "1.raw"]
    );
}

#[test]
fn eval_ground_truth_against_itself() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "ds", "--count", "3", "--size", "24"]);
    let csv = ok(d, &["eval", "--input-dir", "ds/high", "--gt-dir", "ds/high"]);
    let report = MetricReport::parse_csv(&csv).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report
        .rows
        .iter()
        .all(|r| r.psnr_db == f64::INFINITY && (r.ssim - 1.0).abs() < 1e-12));
    assert!(csv.lines().last().unwrap().starts_with("mean,inf,1"));
}

#[test]
fn eval_untrained_model_on_synth_set() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    train_tiny(d, "run", "1");
    ok(d, &["synth", "--out", "ds", "--count", "3", "--size", "24"]);
    ok(
        d,
        &[
            "eval",
            "--model",
            "run/model.lan",
            "--input-dir",
            "ds/low",
            "--gt-dir",
            "ds/high",
            "--output",
            "m.csv",
        ],
    );
    let report = MetricReport::parse_csv(&fs::read_to_string(d.join("m.csv")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.psnr_db.is_finite() && r.ssim.is_finite()));
    let n = report.rows.len() as f64;
    let (mp, ms) = report.mean();
    assert!((mp - report.rows.iter().map(|r| r.psnr_db).sum::<f64>() / n).abs() < 1e-9);
    assert!((ms - report.rows.iter().map(|r| r.ssim).sum::<f64>() / n).abs() < 1e-9);
}

#[test]
fn eval_rejects_empty_pairing() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("a")).unwrap();
    fs::create_dir_all(d.join("b")).unwrap();
    let out = lan(d, &["eval", "--input-dir", "a", "--gt-dir", "b"]);
    assert!(!out.status.success());
}

#[test]
fn verify_fast_passes_and_reports_flop_ratio() {
    let tmp = TempDir::new().unwrap();
    let out = ok(tmp.path(), &["verify", "--level", "fast"]);
    let lines: Vec<&str> = out
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .collect();
    assert_eq!(lines.len(), 12, "{out}");
    assert!(lines.iter().all(|l| l.starts_with("PASS")), "{out}");
    let ratio = lines.iter().find(|l| l.contains("complexity-ratio")).unwrap();
    assert!(ratio.contains("32x32: 256.0"), "{ratio}");
}

#[test]
fn corrupted_backward_rule_fails_its_line() {
    let tmp = TempDir::new().unwrap();
    let out = lan(tmp.path(), &["verify", "--only", "1", "--inject-fault", "softmax_last"]);
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with("FAIL  1")).expect("FAIL line");
    assert!(line.contains("softmax_last"), "{line}");
    assert!(!lan(tmp.path(), &["verify", "--inject-fault", "bogus"]).status.success());
}

#[test]
fn synth_is_seeded_darker_and_guards_collisions() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["--seed", "9", "synth", "--out", "a", "--count", "2", "--size", "32"],
    );
    ok(
        d,
        &["--seed", "9", "synth", "--out", "b", "--count", "2", "--size", "32"],
    );
    for sub in ["low", "high"] {
        let names: Vec<_> = fs::read_dir(d.join("a").join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 2);
        for n in names {
            assert_eq!(
                fs::read(d.join("a").join(sub).join(&n)).unwrap(),
                fs::read(d.join("b").join(sub).join(&n)).unwrap()
            );
        }
    }
    let mean = |p: &str| {
        let t = load_image(&d.join(p)).unwrap();
        t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
    };
    assert!(mean("a/low/0000.png") < mean("a/high/0000.png"));
    let clash = lan(d, &["synth", "--out", "a", "--count", "2", "--size", "32"]);
    assert!(!clash.status.success());
    assert!(String::from_utf8_lossy(&clash.stderr).contains("overwrite"));
    ok(
        d,
        &["synth", "--out", "a", "--count", "2", "--size", "32", "--overwrite"],
    );
}
