use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde_json::Value;
use tempfile::TempDir;

use texdiff::config::RunConfig;
use texdiff::io::{load_depth, read_rtf};
use texdiff::pipeline::model_params;
use texdiff_core::diffusion::{encode_depth, DepthMap, DepthSource, Steps};
use texdiff_core::numeric::Tensor;

fn texdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_texdiff"))
        .args(args)
        .env_remove("TEXDIFF_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = texdiff(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn value_of(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}=` in {text}"))
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Constant gray RGB and constant depth, both 32×32.
fn flat_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let rgb = dir.join("gray.png");
    let depth = dir.join("depth.png");
    RgbImage::from_pixel(32, 32, Rgb([128, 128, 128]))
        .save(&rgb)
        .unwrap();
    GrayImage::from_pixel(32, 32, Luma([90]))
        .save(&depth)
        .unwrap();
    (rgb, depth)
}

fn report_without_timing(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn usage_errors_are_one_line_with_exit_2() {
    for args in [
        vec!["extract"],
        vec!["nonsense"],
        vec!["sweep", "--param", "width"],
    ] {
        let o = texdiff(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error[usage]: "), "{err}");
    }
}

#[test]
fn run_errors_name_the_subcommand() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.png");
    let o = texdiff(&["extract", "--in", s(&missing), "--out", "x.rtf"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error[extract]: ") && err.contains("missing.png"),
        "{err}"
    );

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "alpha = 0.3\nwidth = 4\n").unwrap();
    let o = texdiff(&["--config", s(&cfg), "gradcheck", "--op", "ssim"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));

    let o = texdiff(&["gradcheck", "--op", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[gradcheck]: "));
}

#[test]
fn extract_diffuse_and_ssim() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "1", "--size", "32", "--out", s(d)]);
    let rgb = d.join("scene_0000_rgb.png");
    let depth = d.join("scene_0000_depth.png");
    let tex = d.join("tex.rtf");

    let out = ok(&[
        "extract",
        "--in",
        s(&rgb),
        "--out",
        s(&tex),
        "--preview",
        s(&d.join("tex.png")),
    ]);
    assert_eq!(value_of(&out, "shape"), "3x12x12");
    assert!(d.join("tex.png").exists());
    let again = d.join("tex2.rtf");
    ok(&["extract", "--in", s(&rgb), "--out", s(&again)]);
    assert_eq!(std::fs::read(&tex).unwrap(), std::fs::read(&again).unwrap());

    let trace = d.join("trace");
    let latent = d.join("latent.rtf");
    let out = ok(&[
        "diffuse",
        "--depth",
        s(&depth),
        "--texture",
        s(&tex),
        "--out",
        s(&latent),
        "--trace",
        s(&trace),
    ]);
    assert_eq!(value_of(&out, "steps_run"), "4");
    assert_eq!(value_of(&out, "latent_shape"), "24x12x12");
    assert_eq!(std::fs::read_dir(&trace).unwrap().count(), 5);
    assert_eq!(
        std::fs::read(trace.join("step_004.rtf")).unwrap(),
        std::fs::read(&latent).unwrap()
    );

    let out = ok(&["ssim", "--a", s(&tex), "--b", s(&tex), "--window", "5"]);
    let v: f64 = value_of(&out, "ssim").parse().unwrap();
    let l: f64 = value_of(&out, "sc_loss").parse().unwrap();
    assert_eq!((v, l), (1.0, 0.0));
}

#[test]
fn diffuse_with_zero_steps_keeps_the_encoded_latent() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "1", "--size", "32", "--out", s(d)]);
    let tex = d.join("tex.rtf");
    ok(&[
        "extract",
        "--in",
        s(&d.join("scene_0000_rgb.png")),
        "--out",
        s(&tex),
    ]);
    let trace = d.join("trace");
    let out = ok(&[
        "diffuse",
        "--depth",
        s(&d.join("scene_0000_depth.png")),
        "--texture",
        s(&tex),
        "--steps",
        "0",
        "--out",
        s(&d.join("latent.rtf")),
        "--trace",
        s(&trace),
    ]);
    assert_eq!(value_of(&out, "steps_run"), "0");
    assert_eq!(std::fs::read_dir(&trace).unwrap().count(), 1);
    assert_eq!(
        std::fs::read(trace.join("step_000.rtf")).unwrap(),
        std::fs::read(d.join("latent.rtf")).unwrap()
    );
}

#[test]
fn pipeline_on_flat_inputs() {
    let dir = TempDir::new().unwrap();
    let (rgb, depth) = flat_inputs(dir.path());
    let out_dir = dir.path().join("run");
    let out = ok(&[
        "pipeline",
        "--rgb",
        s(&rgb),
        "--depth",
        s(&depth),
        "--out-dir",
        s(&out_dir),
    ]);
    for f in ["texture.rtf", "enhanced.rtf", "pred.png", "report.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    assert!(value_of(&out, "params_hash").starts_with("sha256:"));

    let report = report_without_timing(&out_dir.join("report.json"));
    assert_eq!(report["schema"], 1);
    assert_eq!(report["image_size"], serde_json::json!([32, 32]));
    assert_eq!(report["steps_run"], 4);
    assert_eq!(report["config"]["kernel"], 7);
    let (lo, hi) = (
        report["prediction"]["min"].as_f64().unwrap(),
        report["prediction"]["max"].as_f64().unwrap(),
    );
    assert!(0.0 < lo && lo <= hi && hi < 1.0, "{lo} {hi}");
    assert!(report.get("metrics").is_none());

    let texture = read_rtf(&out_dir.join("texture.rtf")).unwrap();
    assert!(texture.max_abs() < 1e-6);
}

#[test]
fn pipeline_with_zero_steps_writes_the_encoded_depth() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "1", "--size", "32", "--out", s(d)]);
    let depth = d.join("scene_0000_depth.png");
    let cfg_path = d.join("run.toml");
    let cfg = RunConfig {
        steps: Steps::Fixed(0),
        seed: 5,
        ..RunConfig::default()
    };
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out_dir = d.join("run");
    ok(&[
        "--config",
        s(&cfg_path),
        "pipeline",
        "--rgb",
        s(&d.join("scene_0000_rgb.png")),
        "--depth",
        s(&depth),
        "--out-dir",
        s(&out_dir),
    ]);

    let model = cfg.model_config().unwrap();
    let params = model_params(&model, 32, 32, cfg.seed, None).unwrap();
    let dm = DepthMap::new(load_depth(&depth).unwrap(), DepthSource::Sensor).unwrap();
    let encoded = encode_depth(&dm, &params.txd).unwrap();
    let encoded = encoded.map(|v| v as f32 as f64);
    let written: Tensor = read_rtf(&out_dir.join("enhanced.rtf")).unwrap();
    assert_eq!(written, encoded);
    let report = report_without_timing(&out_dir.join("report.json"));
    assert_eq!(report["steps_run"], 0);
}

#[test]
fn pipeline_reports_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "1", "--size", "32", "--out", s(d)]);
    let mut reports = Vec::new();
    let mut preds = Vec::new();
    for run in ["a", "b"] {
        let out_dir = d.join(run);
        ok(&[
            "pipeline",
            "--rgb",
            s(&d.join("scene_0000_rgb.png")),
            "--depth",
            s(&d.join("scene_0000_depth.png")),
            "--gt",
            s(&d.join("scene_0000_mask.png")),
            "--out-dir",
            s(&out_dir),
        ]);
        reports.push(report_without_timing(&out_dir.join("report.json")));
        preds.push(std::fs::read(out_dir.join("pred.png")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(preds[0], preds[1]);
    let m = &reports[0]["metrics"];
    assert!(m["mae"].as_f64().unwrap() <= 1.0 && m["f_beta_max"].as_f64().is_some());
    assert!(reports[0]["losses"]["l_total"].as_f64().is_some());
}

#[test]
fn eval_scores_a_perfect_prediction() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "2", "--size", "32", "--out", s(d)]);
    let (pred, gt) = (d.join("pred"), d.join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for i in 0..2 {
        let mask = d.join(format!("scene_{i:04}_mask.png"));
        std::fs::copy(&mask, pred.join(format!("{i}.png"))).unwrap();
        std::fs::copy(&mask, gt.join(format!("{i}.png"))).unwrap();
    }
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt)]);
    let lines: Vec<Value> = out
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    let agg = &lines[2]["aggregate"];
    assert_eq!(
        (
            agg["mae"].as_f64(),
            agg["f_beta_max"].as_f64(),
            agg["miou"].as_f64()
        ),
        (Some(0.0), Some(1.0), Some(1.0))
    );

    let o = texdiff(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--metrics",
        "mae,bogus",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[eval]: "));
}

#[test]
fn train_toy_writes_artifacts_that_pipeline_accepts() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg_path = d.join("train.toml");
    let mut cfg = RunConfig::default();
    cfg.train.n_scenes = 2;
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let run = d.join("run");
    let out = ok(&[
        "--config",
        s(&cfg_path),
        "train-toy",
        "--out",
        s(&run),
        "--steps",
        "3",
    ]);
    assert_eq!(value_of(&out, "steps"), "3");
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let saved =
        RunConfig::from_toml(&std::fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.train.steps, 3);
    assert_eq!(saved.train.n_scenes, 2);

    let (rgb, depth) = flat_inputs(d);
    let params = run.join("params.rtfz");
    let a = ok(&[
        "pipeline",
        "--rgb",
        s(&rgb),
        "--depth",
        s(&depth),
        "--params",
        s(&params),
        "--out-dir",
        s(&d.join("p")),
    ]);
    let b = ok(&[
        "pipeline",
        "--rgb",
        s(&rgb),
        "--depth",
        s(&depth),
        "--out-dir",
        s(&d.join("q")),
    ]);
    assert_ne!(value_of(&a, "params_hash"), value_of(&b, "params_hash"));
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let out = ok(&[
        "sweep",
        "--param",
        "steps",
        "--train-steps",
        "1",
        "--n-scenes",
        "1",
        "--parallel",
        "2",
    ]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("value,status"));
    for (row, v) in rows[1..].iter().zip(["1", "3", "5"]) {
        assert!(row.starts_with(&format!("{v},ok,")), "{row}");
    }

    let json = dir.path().join("sweep.json");
    let out = ok(&[
        "sweep",
        "--param",
        "lambda",
        "--values",
        "0,0.04",
        "--train-steps",
        "1",
        "--n-scenes",
        "1",
        "--out",
        s(&json),
    ]);
    assert_eq!(value_of(&out, "rows"), "2");
    let table: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(table["parameter"], "lambda");
    assert_eq!(table["rows"][1]["config"]["lambda"], 0.04);

    let o = texdiff(&[
        "sweep",
        "--param",
        "kernel",
        "--values",
        "4",
        "--train-steps",
        "1",
        "--n-scenes",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("error[sweep]: ") && stderr(&o).contains("kernel 4"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn gradcheck_single_op() {
    let out = ok(&["gradcheck", "--op", "softmax"]);
    assert!(
        out.contains("softmax") && out.trim_end().ends_with("PASS"),
        "{out}"
    );
}

#[test]
fn synthetic_scenes_are_named_by_their_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--seed", "1", "synth", "--n", "2", "--out", s(&a)]);
    ok(&["--seed", "2", "synth", "--n", "1", "--out", s(&b)]);
    assert_eq!(std::fs::read_dir(&a).unwrap().count(), 6);
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(
        read(a.join("scene_0002_rgb.png")),
        read(b.join("scene_0002_rgb.png"))
    );
    assert_ne!(
        read(a.join("scene_0001_rgb.png")),
        read(a.join("scene_0002_rgb.png"))
    );
}
