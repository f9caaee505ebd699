use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uanet::config::RunConfig;
use uanet::gradcheck::suite::{run_suite, Precision, SuiteOptions};
use uanet::io::{self, read_container, write_container, write_pgm, write_png};
use uanet::metrics::{report_csv, report_table, uncertainty_visual, ReportRow};
use uanet::model::{rank_maps, FusionCase, PigmMode, UaNet, UraFormula};
use uanet::params::ParamStore;
use uanet::synth::{generate_dataset, load_dataset, write_dataset, Scene};
use uanet::train::{evaluate, format_log, load_checkpoint, save_checkpoint, train, Control, LevelEval, TrainOptions};
use uanet::{seed, Exec, Tensor};

const CHECKPOINT: &str = "checkpoint.uarc";

#[derive(Parser, Debug)]
#[command(
    name = "uanet",
    version,
    about = "Uncertainty-aware building segmentation on synthetic scenes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file; flags win.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; data, init and augmentation sub-seeds derive from it
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs and rasters
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Rank bucketing rule
    #[arg(long, global = true, value_name = "prose|floor")]
    ura: Option<UraFormula>,
    /// Fusion case 1..4 (case 0, the plain baseline, is set in the config)
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=4))]
    case: Option<u8>,
    /// Prior-guided attention mode
    #[arg(long, global = true, value_name = "off|sc|cc|sc_cc")]
    pigm: Option<PigmMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/val scenes and their manifests
    GenData,
    /// Train and write a checkpoint plus the loss CSV
    Train,
    /// Print IoU/F1/Pre/Recall per prediction level on the val manifest
    Eval {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        level: Option<u8>,
        /// Checkpoint to evaluate (default: <out>/checkpoint.uarc)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest to evaluate on (default: <data.dir>/val.txt)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write the logits and thresholded mask of one image
    Infer {
        /// Image container (.uatn, 3 x H x W)
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=5))]
        level: u8,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write uncertainty rasters and rank maps for every level
    Uncertainty {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 64, value_parser = parse_bits)]
        bits: u8,
        #[arg(long, default_value_t = 10)]
        op_seeds: usize,
        #[arg(long, default_value_t = 2)]
        composite_seeds: usize,
    },
    /// Train the case and PIGM-mode grid and write a combined CSV
    Ablate,
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("expected 32 or 64, got {s}")),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(f) = self.ura {
            cfg.ura.formula = f;
        }
        if let Some(c) = self.case {
            cfg.uafm.case = c;
        }
        if let Some(m) = self.pigm {
            cfg.pigm.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    uanet::parallel::init_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Gradcheck {
        bits,
        op_seeds,
        composite_seeds,
    } = cli.command
    {
        return gradcheck(bits, op_seeds, composite_seeds);
    }
    let cfg = cli.common.resolve()?;
    match cli.command {
        Command::GenData => gen_data(&cfg)?,
        Command::Train => train_cmd(&cfg)?,
        Command::Eval {
            level,
            checkpoint,
            manifest,
        } => eval(&cfg, level, checkpoint, manifest)?,
        Command::Infer {
            image,
            level,
            checkpoint,
        } => infer(&cfg, &image, level as usize, checkpoint)?,
        Command::Uncertainty { image, checkpoint } => uncertainty(&cfg, &image, checkpoint)?,
        Command::Ablate => ablate(&cfg)?,
        Command::Gradcheck { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    let scenes: Vec<Scene<f32>> = generate_dataset(
        &d.scene,
        cfg.sub_seed("data"),
        d.train_scenes + d.val_scenes,
        Exec::default(),
    )?;
    let (train, val) = scenes.split_at(d.train_scenes);
    let t = write_dataset(&d.dir, "train.txt", train, 0)?;
    let v = write_dataset(&d.dir, "val.txt", val, d.train_scenes)?;
    println!(
        "wrote {} train scenes ({}) and {} val scenes ({})",
        train.len(),
        t.display(),
        val.len(),
        v.display()
    );
    Ok(())
}

fn load_scenes(manifest: &Path) -> Result<Vec<Scene<f32>>> {
    load_dataset(manifest).with_context(|| format!("loading {} (run gen-data first?)", manifest.display()))
}

fn build(cfg: &RunConfig) -> Result<(UaNet, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let net = UaNet::new(&cfg.net()?, &mut store, &mut seed::rng(cfg.seed, "init"))?;
    Ok((net, store))
}

fn restore(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(UaNet, ParamStore<f32>)> {
    let (net, mut store) = build(cfg)?;
    let path = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT));
    load_checkpoint(&path, &mut store).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((net, store))
}

fn fit(cfg: &RunConfig, scenes: &[Scene<f32>], rescue: Option<PathBuf>) -> Result<(UaNet, ParamStore<f32>, String)> {
    let (net, mut store) = build(cfg)?;
    let mut opts = TrainOptions::new(cfg.optim.clone(), cfg.seed);
    opts.rescue = rescue;
    let log = train(&net, &mut store, scenes, &opts, |_, _| Control::Continue)?;
    Ok((net, store, format_log(&log)))
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let scenes = load_scenes(&cfg.data.train_manifest())?;
    fs::create_dir_all(&cfg.out)?;
    let (_, store, log) = fit(cfg, &scenes, Some(cfg.out.join("rescue.uarc")))?;
    let ckpt = cfg.out.join(CHECKPOINT);
    save_checkpoint(&ckpt, &store)?;
    fs::write(cfg.out.join("loss.csv"), &log)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    let last = log.lines().last().unwrap_or_default();
    println!(
        "trained {} steps on {} scenes; last row {last}",
        cfg.optim.steps,
        scenes.len()
    );
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn level_rows(evals: &[LevelEval], only: Option<u8>) -> Vec<ReportRow> {
    evals
        .iter()
        .filter(|e| only.is_none_or(|l| e.level == l as usize))
        .map(|e| ReportRow {
            label: format!("M{}", e.level),
            scores: e.confusion.scores(),
        })
        .collect()
}

fn eval(cfg: &RunConfig, level: Option<u8>, checkpoint: Option<PathBuf>, manifest: Option<PathBuf>) -> Result<()> {
    let (net, store) = restore(cfg, checkpoint)?;
    let scenes = load_scenes(&manifest.unwrap_or_else(|| cfg.data.val_manifest()))?;
    let evals = evaluate(&net, &store, &scenes, Exec::default())?;
    let rows = level_rows(&evals, level);
    if rows.is_empty() {
        bail!("level M{} is not produced by {}", level.unwrap_or(0), net.cfg.label());
    }
    print!("{}", report_table(&rows));
    Ok(())
}

fn predict(net: &UaNet, store: &ParamStore<f32>, image: &Path) -> Result<Vec<(usize, Tensor<f32>)>> {
    let img: Tensor<f32> = read_container(image).with_context(|| format!("reading {}", image.display()))?;
    let (c, h, w) = img.chw()?;
    if c != UaNet::IN_CHANNELS || h % 16 != 0 || w % 16 != 0 {
        bail!(
            "{}: expected a 3 x H x W image with H, W divisible by 16, got {:?}",
            image.display(),
            img.shape()
        );
    }
    Ok(net.predict(store, &img)?)
}

fn stem(image: &Path) -> String {
    image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn infer(cfg: &RunConfig, image: &Path, level: usize, checkpoint: Option<PathBuf>) -> Result<()> {
    let (net, store) = restore(cfg, checkpoint)?;
    let maps = predict(&net, &store, image)?;
    let Some((_, logits)) = maps.into_iter().find(|(l, _)| *l == level) else {
        bail!("level M{level} is not produced by {}", net.cfg.label());
    };
    fs::create_dir_all(&cfg.out)?;
    let name = stem(image);
    let logits_path = cfg.out.join(format!("{name}_m{level}_logits.uatn"));
    let mask_path = cfg.out.join(format!("{name}_m{level}_mask.pgm"));
    write_container(&logits_path, &logits)?;
    let mask = logits.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
    write_pgm(&mask_path, &io::mask_to_image(&mask)?)?;
    println!("{}\n{}", logits_path.display(), mask_path.display());
    Ok(())
}

fn uncertainty(cfg: &RunConfig, image: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let (net, store) = restore(cfg, checkpoint)?;
    let maps = predict(&net, &store, image)?;
    let dir = cfg.out.join(format!("{}_uncertainty", stem(image)));
    fs::create_dir_all(&dir)?;
    for (level, logits) in &maps {
        let (raster, mean) = uncertainty_visual(logits);
        let img = io::scalar_to_image(&raster, 0.5)?;
        write_png(&dir.join(format!("m{level}_uncertainty.png")), &img)?;
        write_pgm(&dir.join(format!("m{level}_uncertainty.pgm")), &img)?;
        let ranks = rank_maps(logits, cfg.ura.formula)?;
        write_pgm(
            &dir.join(format!("m{level}_rank_fg.pgm")),
            &io::ranks_to_image(&ranks.foreground, ranks.height, ranks.width),
        )?;
        write_pgm(
            &dir.join(format!("m{level}_rank_bg.pgm")),
            &io::ranks_to_image(&ranks.background, ranks.height, ranks.width),
        )?;
        println!("M{level}: mean uncertainty {mean:.4}");
    }
    println!("rasters in {}", dir.display());
    Ok(())
}

fn gradcheck(bits: u8, op_seeds: usize, composite_seeds: usize) -> Result<ExitCode> {
    let precision = if bits == 32 { Precision::F32 } else { Precision::F64 };
    let tol = precision.tolerance();
    let results = run_suite(&SuiteOptions {
        op_seeds,
        composite_seeds,
        precision,
        ..SuiteOptions::default()
    })?;
    let mut failed = 0;
    for r in &results {
        let ok = r.report.passes(tol);
        failed += usize::from(!ok);
        println!(
            "{:<4} {:<18} {}",
            if ok { "ok" } else { "FAIL" },
            r.case.to_string(),
            r.report
        );
    }
    println!(
        "{}/{} cases within {tol:.0e} ({bits}-bit)",
        results.len() - failed,
        results.len()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Eight rows: cases 1..4 under full PIGM, then the four PIGM modes under case 4.
fn ablation_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut grid = Vec::new();
    for case in FusionCase::ALL {
        let mut c = base.clone();
        c.uafm.case = case.number();
        c.pigm.mode = PigmMode::SpatialChannel;
        grid.push((format!("{case}"), c));
    }
    for mode in PigmMode::ALL {
        let mut c = base.clone();
        c.uafm.case = FusionCase::Full.number();
        c.pigm.mode = mode;
        grid.push((format!("pigm_{mode}"), c));
    }
    grid
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let train_set = load_scenes(&cfg.data.train_manifest())?;
    let val = load_scenes(&cfg.data.val_manifest())?;
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut done: Vec<(RunConfig, ReportRow)> = Vec::new();
    for (label, run_cfg) in ablation_grid(cfg) {
        let scores = match done.iter().find(|(c, _)| *c == run_cfg) {
            Some((_, r)) => r.scores,
            None => {
                let (net, store, _) = fit(&run_cfg, &train_set, None)?;
                let evals = evaluate(&net, &store, &val, Exec::default())?;
                let m1 = level_rows(&evals, Some(1)).remove(0);
                done.push((run_cfg, m1.clone()));
                m1.scores
            }
        };
        eprintln!("{label}: IoU {:.2}", 100.0 * scores.iou);
        rows.push(ReportRow { label, scores });
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("ablation.csv");
    fs::write(&path, report_csv(&rows))?;
    print!("{}", report_table(&rows));
    println!("{}", path.display());
    Ok(())
}
