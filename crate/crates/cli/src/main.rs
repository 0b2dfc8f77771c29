use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use texdiff::config::{RunConfig, SweepParam, SweepSpec};
use texdiff::io::{
    load_depth, load_image, load_labels, load_mask, read_rtf, save_image, save_preview, write_rtf,
    Bundle, ImageKind,
};
use texdiff::pipeline::{run_pipeline, PipelineInputs, PipelineOutputs};
use texdiff::sweep::run_sweep;
use texdiff_core::consistency::{sc_loss, ssim, SsimParams, WindowKind};
use texdiff_core::diffusion::{diffuse, DepthMap, DepthSource, Steps, TxdConfig, TxdParams};
use texdiff_core::grad::{gradcheck, gradcheck_all, synth_scenes, train_toy};
use texdiff_core::metrics::{f_measure_max, mae, miou, LabelMap, MetricsConfig, BETA2};
use texdiff_core::texture::{extract_texture, TexConfig};

#[derive(Parser)]
#[command(
    name = "texdiff",
    version,
    about = "Depth-guided texture diffusion toolkit"
)]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image and per-row parallelism.
    #[arg(long, global = true, env = "TEXDIFF_THREADS")]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// High-pass texture map of an RGB image.
    Extract {
        #[arg(long)]
        alpha: Option<f64>,
        /// Working size as `HxW`.
        #[arg(long)]
        size: Option<String>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Diffuse a depth latent guided by a texture map.
    Diffuse {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        texture: PathBuf,
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long)]
        latent: Option<usize>,
        /// `auto` or an iteration count.
        #[arg(long)]
        steps: Option<Steps>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preview: Option<PathBuf>,
        /// Directory receiving one RTF1 latent per step.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// SSIM and consistency loss between two tensors.
    Ssim {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 11)]
        window: usize,
        #[arg(long, default_value_t = 1.5)]
        sigma: f64,
    },
    /// Full model on one RGB-D pair.
    Pipeline {
        #[arg(long)]
        rgb: Option<PathBuf>,
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Binary mask; enables the segmentation loss and metrics in the report.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Prediction PNG; texture.rtf and enhanced.rtf are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score prediction maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated subset of mae, fbeta, miou.
        #[arg(long, default_value = "mae,fbeta,miou")]
        metrics: String,
        /// Number of label classes; above 2 the PNG values are class indices.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        ignore_label: Option<u32>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        op: String,
    },
    /// Train on synthetic scenes.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write synthetic RGB, depth and mask images.
    Synth {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configuration axis over a list of values.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; defaults to the standard grid for the axis.
        #[arg(long)]
        values: Option<String>,
        /// Rows run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        train_steps: Option<usize>,
        #[arg(long)]
        n_scenes: Option<usize>,
        /// JSON table; CSV goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Extract { .. } => "extract",
            Cmd::Diffuse { .. } => "diffuse",
            Cmd::Ssim { .. } => "ssim",
            Cmd::Pipeline { .. } => "pipeline",
            Cmd::Eval { .. } => "eval",
            Cmd::Gradcheck { .. } => "gradcheck",
            Cmd::TrainToy { .. } => "train-toy",
            Cmd::Synth { .. } => "synth",
            Cmd::Sweep { .. } => "sweep",
        }
    }
}

fn parse_size(s: &str) -> anyhow::Result<[usize; 2]> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size `{s}` must look like HxW"))?;
    Ok([h.trim().parse()?, w.trim().parse()?])
}

fn base_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit(verbose: bool, msg: impl FnOnce() -> String) {
    if verbose {
        eprintln!("{}", msg());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = base_config(&cli)?;
    let verbose = cli.verbose;
    match cli.cmd {
        Cmd::Extract {
            alpha,
            size,
            input,
            out,
            preview,
        } => {
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(s) = size {
                cfg.texture_size = parse_size(&s)?;
            }
            let tex = TexConfig {
                alpha: cfg.alpha,
                target_h: cfg.texture_size[0],
                target_w: cfg.texture_size[1],
            };
            let x = load_image(&input, ImageKind::Rgb8)?;
            let xh = extract_texture(&x, &tex)?;
            write_rtf(&out, &xh)?;
            if let Some(p) = preview {
                save_preview(&p, &xh)?;
            }
            let energy: f64 = xh.data().iter().map(|v| v * v).sum();
            println!("shape={}x{}x{}", xh.channels(), xh.height(), xh.width());
            println!("alpha={}", tex.alpha);
            println!("energy={energy:.9e}");
        }
        Cmd::Diffuse {
            depth,
            texture,
            kernel,
            latent,
            steps,
            params,
            out,
            preview,
            trace,
        } => {
            let xh = read_rtf(&texture)?;
            let txd = TxdConfig {
                latent_dim: latent.unwrap_or(cfg.latent_dim),
                window: kernel.unwrap_or(cfg.kernel),
                steps: steps.unwrap_or(cfg.steps),
                latent_size: (xh.height(), xh.width()),
                ..TxdConfig::default()
            };
            let mut p = TxdParams::init(&txd, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            if let Some(path) = params {
                let bundle = Bundle::read(&path)?;
                bundle.apply(
                    p.convs_mut()
                        .into_iter()
                        .map(|(n, c)| (format!("txd.{n}"), c)),
                )?;
            }
            let d = DepthMap::new(load_depth(&depth)?, DepthSource::Sensor)?;
            let result = diffuse(&d, &xh, &p, trace.is_some())?;
            write_rtf(&out, &result.enhanced.latent)?;
            if let Some(path) = preview {
                save_preview(&path, &result.enhanced.projected)?;
            }
            if let Some(dir) = trace {
                for (t, l) in result.trace.iter().enumerate() {
                    write_rtf(&dir.join(format!("step_{t:03}.rtf")), l)?;
                }
            }
            let l = &result.enhanced.latent;
            println!("steps_run={}", result.steps_run);
            println!("latent_shape={}x{}x{}", l.channels(), l.height(), l.width());
        }
        Cmd::Ssim {
            a,
            b,
            window,
            sigma,
        } => {
            let p = SsimParams {
                window,
                window_kind: WindowKind::Gaussian { sigma },
                ..SsimParams::default()
            };
            let (ta, tb) = (read_rtf(&a)?, read_rtf(&b)?);
            println!("ssim={:.17e}", ssim(&ta, &tb, &p)?);
            println!("sc_loss={:.17e}", sc_loss(&ta, &tb, &p)?);
        }
        Cmd::Pipeline {
            rgb,
            depth,
            gt,
            params,
            out,
            report,
            out_dir,
        } => {
            cfg.io.rgb = rgb.or(cfg.io.rgb);
            cfg.io.depth = depth.or(cfg.io.depth);
            cfg.io.gt = gt.or(cfg.io.gt);
            cfg.io.params = params.or(cfg.io.params);
            let inputs = PipelineInputs::from_config(&cfg)?;
            let outputs = match (out, out_dir.or(cfg.io.out_dir.clone())) {
                (Some(pred), _) => {
                    let dir = pred.parent().map(Path::to_path_buf).unwrap_or_default();
                    let mut o = PipelineOutputs::in_dir(&dir);
                    o.pred = pred;
                    o.report = report.unwrap_or(o.report);
                    o
                }
                (None, Some(dir)) => {
                    let mut o = PipelineOutputs::in_dir(&dir);
                    o.report = report.unwrap_or(o.report);
                    o
                }
                (None, None) => bail!("give --out or --out-dir"),
            };
            let r = run_pipeline(&cfg, &inputs, &outputs)?;
            emit(verbose, || format!("timing: {:?}", r.timing));
            println!("report={}", outputs.report.display());
            println!("pred={}", outputs.pred.display());
            println!("l_sc={:.17e}", r.losses.l_sc);
            println!("params_hash={}", r.params_hash);
        }
        Cmd::Eval {
            pred,
            gt,
            metrics,
            classes,
            ignore_label,
        } => eval(&pred, &gt, &metrics, classes, ignore_label)?,
        Cmd::Gradcheck { op } => {
            let reports = if op == "all" {
                gradcheck_all(cfg.seed)?
            } else {
                vec![gradcheck(&op, cfg.seed)?]
            };
            for r in &reports {
                println!("{r}");
            }
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.op_name.as_str())
                .collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Cmd::TrainToy { out, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let tc = cfg.train_config()?;
            let run = train_toy(&tc)?;
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            std::fs::write(out.join("loss.csv"), run.to_csv()).context("writing loss.csv")?;
            Bundle::from_convs(run.params.convs()).write(&out.join("params.rtfz"))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())
                .context("writing config.toml")?;
            let (first, last) = (run.initial(), run.last());
            println!("steps={}", tc.steps);
            println!("l_sc_initial={:.17e}", first.l_sc);
            println!("l_sc_final={:.17e}", last.l_sc);
            println!("l_seg_final={:.17e}", last.l_seg);
            println!("l_total_final={:.17e}", last.l_total);
        }
        Cmd::Synth { n, size, out } => {
            for sc in synth_scenes(cfg.seed, n, size)? {
                let stem = format!("scene_{:04}", sc.seed);
                save_image(
                    &out.join(format!("{stem}_rgb.png")),
                    &sc.rgb,
                    ImageKind::Rgb8,
                )?;
                save_image(
                    &out.join(format!("{stem}_depth.png")),
                    sc.depth.tensor(),
                    ImageKind::Depth16,
                )?;
                save_image(
                    &out.join(format!("{stem}_mask.png")),
                    &sc.mask,
                    ImageKind::Depth8,
                )?;
            }
            println!("scenes={n}");
            println!("out={}", out.display());
        }
        Cmd::Sweep {
            param,
            values,
            parallel,
            train_steps,
            n_scenes,
            out,
        } => {
            if let Some(s) = train_steps {
                cfg.train.steps = s;
            }
            if let Some(n) = n_scenes {
                cfg.train.n_scenes = n;
            }
            let values = values.map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
            let spec = SweepSpec::new(param, values, cfg)?;
            let table = run_sweep(&spec, parallel);
            match out {
                Some(path) => {
                    let json = serde_json::to_string_pretty(&table)?;
                    std::fs::write(&path, json).with_context(|| path.display().to_string())?;
                    println!("rows={}", table.rows.len());
                    println!("failures={}", table.failures());
                }
                None => print!("{}", table.to_csv()),
            }
            if table.failures() > 0 {
                bail!(
                    "{} of {} sweep rows failed",
                    table.failures(),
                    table.rows.len()
                );
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Metric {
    Mae,
    Fbeta,
    Miou,
}

fn eval(
    pred_dir: &Path,
    gt_dir: &Path,
    metrics: &str,
    classes: Option<usize>,
    ignore: Option<u32>,
) -> anyhow::Result<()> {
    let wanted: Vec<Metric> = metrics
        .split(',')
        .map(|m| match m.trim() {
            "mae" => Ok(Metric::Mae),
            "fbeta" => Ok(Metric::Fbeta),
            "miou" => Ok(Metric::Miou),
            "smeasure" | "emeasure" => bail!("`{m}` needs externally supplied sub-measures"),
            other => bail!("unknown metric `{other}`"),
        })
        .collect::<anyhow::Result<_>>()?;
    let classes = classes.unwrap_or(2);
    if classes > 2 && wanted.iter().any(|m| *m != Metric::Miou) {
        bail!("with more than 2 classes only miou applies");
    }
    let mut names: Vec<String> = std::fs::read_dir(pred_dir)
        .with_context(|| pred_dir.display().to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png") || n.ends_with(".pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("{}: no .png or .pgm predictions", pred_dir.display());
    }

    let score = |name: &String| -> anyhow::Result<Vec<(Metric, f64)>> {
        let (p, g) = (pred_dir.join(name), gt_dir.join(name));
        let mut row = Vec::new();
        if classes > 2 {
            let (ph, pw, pl) = load_labels(&p)?;
            let (gh, gw, gl) = load_labels(&g)?;
            let v = miou(
                &LabelMap::new(ph, pw, pl)?,
                &LabelMap::new(gh, gw, gl)?,
                classes,
                ignore,
            )
            .with_context(|| name.clone())?;
            row.push((Metric::Miou, v));
            return Ok(row);
        }
        let pred = load_depth(&p)?;
        let gt = load_mask(&g)?;
        for m in &wanted {
            let v = match m {
                Metric::Mae => mae(&pred, &gt),
                Metric::Fbeta => {
                    f_measure_max(&pred, &gt, BETA2, MetricsConfig::default().thresholds)
                }
                Metric::Miou => miou(
                    &LabelMap::from_probabilities(&pred)?,
                    &LabelMap::from_mask(&gt)?,
                    2,
                    ignore,
                ),
            }
            .with_context(|| name.clone())?;
            row.push((*m, v));
        }
        Ok(row)
    };
    let rows: Vec<Vec<(Metric, f64)>> =
        names.par_iter().map(score).collect::<anyhow::Result<_>>()?;

    let key = |m: Metric| match m {
        Metric::Mae => "mae",
        Metric::Fbeta => "f_beta_max",
        Metric::Miou => "miou",
    };
    for (name, row) in names.iter().zip(&rows) {
        let mut obj = serde_json::Map::new();
        obj.insert("image".into(), name.clone().into());
        for (m, v) in row {
            obj.insert(key(*m).into(), (*v).into());
        }
        println!("{}", serde_json::Value::Object(obj));
    }
    let mut agg = serde_json::Map::new();
    for (i, (m, _)) in rows[0].iter().enumerate() {
        let mean = rows.iter().map(|r| r[i].1).sum::<f64>() / rows.len() as f64;
        agg.insert(key(*m).into(), mean.into());
    }
    println!(
        "{}",
        serde_json::json!({ "aggregate": agg, "images": rows.len() })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let name = cli.cmd.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{name}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
