use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use advpatch_core::creases::CreaseFieldConfig;
use advpatch_core::detector::{detections_to_text, Detector};
use advpatch_core::eval::{
    build_ground_truth, evaluate_detailed, reports_to_csv, summary_table, sweep, DefenseConfig, DefenseKind,
    EvalReport, SweepAxes,
};
use advpatch_core::image::BilinearMap;
use advpatch_core::render::{render, INPUT_SIZE};
use advpatch_core::synthetic::{generate_scenes, guide_pattern, SyntheticConfig};
use advpatch_core::trainer::{
    initial_state, load_checkpoint, run_steps, save_checkpoint, AttackConfig, PatchInit, TrainState, LOG_HEADER,
};
use advpatch_core::{GuideImage, PatchImage, Scene};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{ingest_dataset, write_dataset};
use crate::error::{CliError, CliResult};
use crate::plot::{line_chart, Series};

#[derive(Debug, Parser)]
#[command(name = "advpatch", version, about = "Adversarial patch attacks on person detectors")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a patch against the configured detector.
    Attack(AttackArgs),
    /// Evaluate a patch (or the clean set) and write a report.
    Eval(EvalArgs),
    /// Evaluate a patch over a grid of scales, crease settings and defenses.
    Sweep(SweepArgs),
    /// Write patched sample scenes for visual inspection.
    RenderPreview(PreviewArgs),
    /// Resample a patch to a printable size.
    ExportPatch(ExportArgs),
    /// Write a synthetic dataset, guide image and starter config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    RandomUniform,
    FromGuide,
    Gray,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Patch side as a fraction of the box height.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Train without the crease warp.
    #[arg(long)]
    pub no_creases: bool,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Continue from a checkpoint; its stored attack config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Patch PNG or checkpoint; omitted evaluates the clean scenes.
    #[arg(long)]
    pub patch: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Apply random creases to the patch at evaluation time.
    #[arg(long)]
    pub creases: bool,
    /// Input defense as `kind=param`, e.g. `jpeg=70`, `median_blur=10`.
    #[arg(long)]
    pub defense: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub patch: PathBuf,
    /// Comma-separated patch scales.
    #[arg(long, value_delimiter = ',')]
    pub scales: Vec<f64>,
    /// Comma-separated crease settings (`off`, `on`).
    #[arg(long, value_delimiter = ',')]
    pub creases: Vec<String>,
    /// Comma-separated defenses (`none`, `kind=param`, or `all`).
    #[arg(long, value_delimiter = ',')]
    pub defenses: Vec<String>,
    /// Also write an SVG plot of mAP against scale.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub patch: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub patch: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    pub dpi: f64,
    #[arg(long, default_value_t = 20.5)]
    pub width_cm: f64,
    #[arg(long, default_value_t = 21.5)]
    pub height_cm: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side of the square guide image in pixels.
    #[arg(long, default_value_t = 64)]
    pub guide_size: usize,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::RenderPreview(a) => preview(a),
        Command::ExportPatch(a) => export_patch(a),
        Command::Synth(a) => synth(a),
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

pub fn load_patch(path: &Path) -> CliResult<PatchImage> {
    if path.extension().is_some_and(|e| e == "ckpt") {
        Ok(load_checkpoint(path)?.1.patch)
    } else {
        PatchImage::load_png(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn load_scenes(cfg: &RunConfig) -> CliResult<Vec<Scene>> {
    let (img, lbl) = cfg.dataset.dirs();
    let loaded = ingest_dataset(&img, &lbl, INPUT_SIZE, cfg.dataset.person_label)?;
    if !loaded.skipped.is_empty() {
        log::warn!("{} unreadable images skipped", loaded.skipped.len());
    }
    log::info!("loaded {} scenes from {}", loaded.scenes.len(), img.display());
    Ok(loaded.scenes)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    config_sha256: String,
    seed: u64,
    detector: &'a str,
    detector_weights_sha256: &'a str,
    dataset_images: usize,
    guide_image: String,
}

fn write_manifest(cfg: &RunConfig, det: &Detector, n: usize, command: &str) -> CliResult<()> {
    let m = Manifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.digest()?,
        seed: cfg.attack.seed,
        detector: det.name(),
        detector_weights_sha256: det.weights_digest(),
        dataset_images: n,
        guide_image: cfg.guide_image.display().to_string(),
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(cfg.output_dir.join("manifest.json"), json + "\n")?;
    fs::write(cfg.output_dir.join("effective_config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn apply_attack_overrides(a: &AttackArgs, c: &mut AttackConfig) {
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.alpha {
        c.weights.alpha = v;
    }
    if let Some(v) = a.beta {
        c.weights.beta = v;
    }
    if let Some(v) = a.gamma {
        c.weights.gamma = v;
    }
    if let Some(v) = a.scale {
        c.render.scale = v;
    }
    if a.no_creases {
        c.creases = CreaseFieldConfig::disabled();
    }
    if let Some(i) = a.init {
        c.patch_init = match i {
            InitArg::RandomUniform => PatchInit::RandomUniform,
            InitArg::FromGuide => PatchInit::FromGuide,
            InitArg::Gray => PatchInit::Gray,
        };
    }
}

fn attack(a: AttackArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.cfg)?;
    apply_attack_overrides(&a, &mut cfg.attack);
    let mut resumed: Option<TrainState> = None;
    if let Some(p) = &a.resume {
        let (stored, state) = load_checkpoint(p)?;
        cfg.attack = stored;
        resumed = Some(state);
    }
    cfg.validate()?;
    cfg.check_paths()?;
    let det = cfg.detector.load()?;
    let scenes = load_scenes(&cfg)?;
    if scenes.is_empty() {
        return Err(CliError::Data("dataset is empty".into()));
    }
    let guide = GuideImage::load_png(&cfg.guide_image).map_err(|e| CliError::Data(format!("guide image: {e}")))?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(out.join("reports"))?;
    write_manifest(&cfg, &det, scenes.len(), "attack")?;

    let mut state = match resumed {
        Some(s) => s,
        None => initial_state(&guide, &cfg.attack)?,
    };
    let log_path = out.join("loss_log.csv");
    let mut log = if state.next_step > 0 && log_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&log_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&log_path)?);
        writeln!(w, "{LOG_HEADER}")?;
        w
    };
    let total = cfg.attack.total_steps(scenes.len());
    eprintln!(
        "attack: {} scenes, {} steps, detector {}, seed {}",
        scenes.len(),
        total,
        det.name(),
        cfg.attack.seed
    );
    let ckpt = out.join("patch.ckpt");
    let every = if a.checkpoint_every == 0 {
        total.max(1)
    } else {
        a.checkpoint_every
    };
    let mut io_err: Option<std::io::Error> = None;
    while state.next_step < total {
        let until = (state.next_step / every + 1) * every;
        run_steps(&scenes, &det, &guide, &cfg.attack, &mut state, Some(until), |r| {
            if let Err(e) = writeln!(log, "{}", r.csv_line()) {
                io_err.get_or_insert(e);
            }
            if r.step % 10 == 0 {
                log::info!(
                    "step {:>5}  l_det {:.4}  l_sim {:.5}  l_tv {:.3}  l_total {:.4}",
                    r.step,
                    r.breakdown.l_det,
                    r.breakdown.l_sim,
                    r.breakdown.l_tv,
                    r.breakdown.l_total
                );
            }
        })?;
        if let Some(e) = io_err.take() {
            return Err(e.into());
        }
        log.flush()?;
        save_checkpoint(&ckpt, &cfg.attack, &state)?;
    }
    if total == 0 {
        save_checkpoint(&ckpt, &cfg.attack, &state)?;
    }
    log.flush()?;
    drop(log);
    state.patch.save_png(&out.join("patch.png"))?;
    write_loss_plot(&log_path, &out.join("reports/loss.svg"))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn write_loss_plot(log_path: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(log_path)?;
    let mut cols: Vec<Series> = ["l_det", "l_sim", "l_tv", "l_total"]
        .iter()
        .map(|n| Series {
            label: n.to_string(),
            points: Vec::new(),
        })
        .collect();
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').filter_map(|v| v.parse().ok()).collect();
        if f.len() == 6 {
            for (k, s) in cols.iter_mut().enumerate() {
                s.points.push((f[1], f[2 + k]));
            }
        }
    }
    // l_tv dwarfs the other terms; plot it on its own.
    let tv = cols.remove(2);
    fs::write(out, line_chart("loss", "step", "value", &cols))?;
    fs::write(
        out.with_file_name("loss_tv.svg"),
        line_chart("total variation", "step", "l_tv", &[tv]),
    )?;
    Ok(())
}

pub fn parse_defense(s: &str) -> CliResult<Option<DefenseConfig>> {
    if s == "none" {
        return Ok(None);
    }
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("defense {s:?} must be `kind=param` or `none`")))?;
    let kind = match k {
        "jpeg" => DefenseKind::Jpeg,
        "gaussian_noise" | "noise" => DefenseKind::GaussianNoise,
        "median_blur" | "median" => DefenseKind::MedianBlur,
        other => return Err(CliError::Usage(format!("unknown defense {other:?}"))),
    };
    let param: f64 = v
        .parse()
        .map_err(|_| CliError::Usage(format!("defense parameter {v:?} is not a number")))?;
    DefenseConfig::from_table(kind, param)
        .map(Some)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn write_reports(dir: &Path, stem: &str, reports: &[EvalReport]) -> CliResult<String> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), reports_to_csv(reports))?;
    let table = summary_table(reports);
    fs::write(dir.join(format!("{stem}.txt")), &table)?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(table)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(s) = a.scale {
        cfg.eval.render.scale = s;
    }
    if a.creases {
        cfg.eval.transforms.creases = cfg.attack.creases;
        if cfg.eval.transforms.creases.is_disabled() {
            cfg.eval.transforms.creases = CreaseFieldConfig::default();
        }
    }
    cfg.validate()?;
    cfg.check_paths()?;
    let defense = a.defense.as_deref().map(parse_defense).transpose()?.flatten();
    let det = cfg.detector.load()?;
    let scenes = load_scenes(&cfg)?;
    let patch = a.patch.as_deref().map(load_patch).transpose()?;
    let gt = build_ground_truth(&det, &scenes)?;
    let (report, dets) = evaluate_detailed(&det, &gt, &scenes, patch.as_ref(), &cfg.eval, defense.as_ref())?;
    let reports_dir = cfg.output_dir.join("reports");
    let table = write_reports(&reports_dir, "eval", std::slice::from_ref(&report))?;
    let person = det.handle().person_class_index;
    let dump: String = scenes
        .iter()
        .zip(&dets)
        .enumerate()
        .map(|(i, (_, d))| detections_to_text(&format!("{i:04}"), d, person, INPUT_SIZE))
        .collect();
    fs::write(reports_dir.join("detections.txt"), dump)?;
    print!("{table}");
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> CliResult<()> {
    let cfg = load_config(&a.cfg)?;
    cfg.validate()?;
    cfg.check_paths()?;
    let det = cfg.detector.load()?;
    let scenes = load_scenes(&cfg)?;
    let patch = load_patch(&a.patch)?;
    let crease_on = if cfg.attack.creases.is_disabled() {
        CreaseFieldConfig::default()
    } else {
        cfg.attack.creases
    };
    let creases = a
        .creases
        .iter()
        .map(|c| match c.as_str() {
            "off" => Ok(None),
            "on" => Ok(Some(crease_on)),
            other => Err(CliError::Usage(format!(
                "creases value {other:?} must be `on` or `off`"
            ))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut defenses = Vec::new();
    for d in &a.defenses {
        if d == "all" {
            defenses.push(None);
            defenses.extend(DefenseConfig::all().into_iter().map(Some));
        } else {
            defenses.push(parse_defense(d)?);
        }
    }
    let axes = SweepAxes {
        scales: a.scales.clone(),
        creases,
        defenses,
    };
    let reports = sweep(&[&det], &scenes, Some(&patch), &cfg.eval, &axes)?;
    let dir = cfg.output_dir.join("reports");
    let table = write_reports(&dir, "sweep", &reports)?;
    if a.plot {
        let mut series: Vec<Series> = Vec::new();
        for r in &reports {
            let label = format!(
                "{} {}",
                r.transform_stack,
                r.defense.as_ref().map_or("no defense".to_string(), |d| d.0.clone())
            );
            let idx = match series.iter().position(|s| s.label == label) {
                Some(i) => i,
                None => {
                    series.push(Series {
                        label,
                        points: Vec::new(),
                    });
                    series.len() - 1
                }
            };
            series[idx].points.push((r.scale.unwrap_or(f64::NAN), r.map_50));
        }
        fs::write(
            dir.join("sweep.svg"),
            line_chart("mAP@0.5 vs patch scale", "scale", "mAP (%)", &series),
        )?;
    }
    print!("{table}");
    Ok(())
}

fn preview(a: PreviewArgs) -> CliResult<()> {
    let cfg = load_config(&a.cfg)?;
    cfg.validate()?;
    cfg.check_paths()?;
    let scenes = load_scenes(&cfg)?;
    let patch = load_patch(&a.patch)?;
    let dir = cfg.output_dir.join("previews");
    fs::create_dir_all(&dir)?;
    let mut placements = String::new();
    for (i, scene) in scenes.iter().take(a.count).enumerate() {
        let t = cfg.eval.transforms.sample((patch.width(), patch.height()), i)?;
        let r = render(scene, &patch, &t, &cfg.eval.render)?;
        r.scene.image.save_png(&dir.join(format!("preview_{i:03}.png")))?;
        for line in r.placements_text().lines() {
            placements.push_str(&format!("{i:03} {line}\n"));
        }
    }
    fs::write(dir.join("placements.txt"), placements)?;
    eprintln!("wrote {} previews to {}", a.count.min(scenes.len()), dir.display());
    Ok(())
}

/// Printed size in pixels of `cm` centimetres at `dpi`.
pub fn print_pixels(cm: f64, dpi: f64) -> usize {
    (cm / 2.54 * dpi).round() as usize
}

fn export_patch(a: ExportArgs) -> CliResult<()> {
    if !(a.dpi > 0.0 && a.width_cm > 0.0 && a.height_cm > 0.0) {
        return Err(CliError::Usage("dpi and physical size must be positive".into()));
    }
    let patch = load_patch(&a.patch)?;
    let (w, h) = (print_pixels(a.width_cm, a.dpi), print_pixels(a.height_cm, a.dpi));
    if w == 0 || h == 0 {
        return Err(CliError::Usage("requested print size rounds to zero pixels".into()));
    }
    let img = BilinearMap::resize(patch.height(), patch.width(), h, w).apply(patch.image());
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    img.save_png(&a.output)?;
    eprintln!(
        "wrote {w}x{h} px ({} x {} cm at {} dpi) to {}",
        a.width_cm,
        a.height_cm,
        a.dpi,
        a.output.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    if a.guide_size < 2 {
        return Err(CliError::Usage("guide size must be at least 2".into()));
    }
    let scenes = generate_scenes(a.count, a.seed, &SyntheticConfig::default());
    write_dataset(&a.out.join("data"), &scenes)?;
    guide_pattern(a.guide_size, a.guide_size, a.seed).save_png(&a.out.join("guide.png"))?;
    let run = format!(
        "guide_image = \"guide.png\"\noutput_dir = \"run\"\n\n[dataset]\nimages = \"data/images\"\nlabels = \"data/labels\"\n\n[attack]\nseed = {}\nepochs = 5\nlr = 0.01\n",
        a.seed
    );
    fs::write(a.out.join("run.toml"), run)?;
    eprintln!("wrote {} scenes, guide and run.toml to {}", a.count, a.out.display());
    Ok(())
}
