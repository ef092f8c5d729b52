use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffews::codec::Codec;
use diffews::data::io::{encode_score_ppm, read_pgm, read_ppm, write_dataset, write_pgm};
use diffews::data::{gen_synthetic, sample_episodes};
use diffews::generation::{build_train_sample, encode_episode, encode_query, infer, InferOptions, Process};
use diffews::runner::ablate::{ablate, expand_grid, rows_to_csv};
use diffews::runner::gradcheck::grad_check;
use diffews::runner::train::{evaluate, fold_spec, load_dataset, train};
use diffews::runner::{Checkpoint, RunConfig};
use diffews::unet::UNet;

#[derive(Parser)]
#[command(name = "diffews", version, about = "Few-shot segmentation with a small latent-diffusion UNet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override one config key, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic shapes dataset as PPM/PGM files plus a manifest.
    GenData(Common),
    /// Train, then evaluate on the held-out classes of the fold.
    Train(Common),
    /// Evaluate a checkpoint on the held-out classes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every cell of a grid such as `interaction=fsa,tca;injection=concatenation,addition`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
    },
    /// Segment one query image given support images and masks.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Support image (PPM); pair each with a --mask in the same order.
        #[arg(long = "support", required = true)]
        supports: Vec<PathBuf>,
        /// Support mask (PGM).
        #[arg(long = "mask", required = true)]
        masks: Vec<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the training loss.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        num_params: usize,
        /// Zero one analytic gradient entry first, to exercise the detector.
        #[arg(long)]
        corrupt: bool,
    },
}

fn resolve(common: &Common, base: RunConfig) -> anyhow::Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        cfg.parse_text(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for s in &common.set {
        cfg.apply(s)?;
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("run.json"), cfg.to_json()?)?;
    Ok(cfg)
}

fn write_metrics(out: &Path, csv: &str) -> anyhow::Result<()> {
    fs::write(out.join("metrics.csv"), csv)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common, RunConfig::default())?;
            let ds = gen_synthetic(cfg.num_classes, cfg.images_per_class, (cfg.canvas, cfg.canvas), cfg.seed)?;
            let manifest = write_dataset(&ds, &common.out)?;
            println!("{}", manifest.display());
        }
        Command::Train(common) => {
            let cfg = resolve(&common, RunConfig::default())?;
            let ds = load_dataset(&cfg)?;
            let report = train(&cfg, &ds, Some(&common.out))?;
            report.checkpoint.save(&common.out.join("final.ckpt"))?;
            let mut log = String::from("iteration,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                log.push_str(&format!("{},{l:.9}\n", i + 1));
            }
            fs::write(common.out.join("loss.csv"), log)?;
            let model = report.checkpoint.model()?;
            let ev = evaluate(&model, &cfg, &ds, &fold_spec(&cfg)?, cfg.n_shot_infer)?;
            write_metrics(&common.out, &ev.csv(cfg.fold, cfg.n_shot_infer)?)?;
            println!("mIoU {:.6}", ev.acc.miou()?);
        }
        Command::Eval { common, checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = resolve(&common, ck.config.clone())?;
            if cfg.unet() != ck.config.unet() {
                bail!("network settings cannot be overridden when evaluating a checkpoint");
            }
            let model = ck.model()?;
            let ds = load_dataset(&cfg)?;
            let ev = evaluate(&model, &cfg, &ds, &fold_spec(&cfg)?, cfg.n_shot_infer)?;
            write_metrics(&common.out, &ev.csv(cfg.fold, cfg.n_shot_infer)?)?;
            println!("mIoU {:.6}", ev.acc.miou()?);
        }
        Command::Ablate { common, grid } => {
            let cfg = resolve(&common, RunConfig::default())?;
            let cells = expand_grid(&grid)?;
            let ds = load_dataset(&cfg)?;
            let rows = ablate(&cfg, &cells, &ds, Some(&common.out))?;
            let csv = rows_to_csv(&rows);
            write_metrics(&common.out, &csv)?;
            print!("{csv}");
        }
        Command::Predict { common, checkpoint, query, supports, masks } => {
            if supports.len() != masks.len() {
                bail!("{} support images but {} masks", supports.len(), masks.len());
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = resolve(&common, ck.config.clone())?;
            let model = ck.model()?;
            let pairs = supports
                .iter()
                .zip(&masks)
                .map(|(s, m)| Ok((read_ppm(s)?, read_pgm(m)?)))
                .collect::<diffews::Result<Vec<_>>>()?;
            let codec = Codec::new(4);
            let enc = encode_query(&codec, &read_ppm(&query)?, &pairs, &model.cfg, 0)?;
            let opts =
                InferOptions { form: cfg.supervision_form, threshold: cfg.threshold()?, kv_sampling: cfg.infer_kv_sampling };
            let out = infer(&model, &enc, &cfg.generation(), &codec, &opts, cfg.seed)?;
            write_pgm(&common.out.join("mask.pgm"), &out.mask)?;
            fs::write(common.out.join("scores.ppm"), encode_score_ppm(&out.scores))?;
            println!("{} foreground pixels", out.mask.count());
        }
        Command::GradCheck { common, num_params, corrupt } => {
            let mut cfg = resolve(&common, RunConfig::default())?;
            if cfg.process != Process::Oi2m {
                info!("gradient check uses the one-step training loss");
                cfg.process = Process::Oi2m;
            }
            let ds = load_dataset(&cfg)?;
            let model = UNet::new(cfg.unet(), cfg.seed)?;
            let classes: Vec<usize> = ds.classes().into_iter().collect();
            let spec = sample_episodes(&ds, &classes, cfg.n_shot_max, 1, cfg.seed)?.remove(0);
            let codec = Codec::new(4);
            let enc = encode_episode(&codec, &ds.episode(&spec), &model.cfg, cfg.supervision_form)?;
            let gen = cfg.generation();
            let sample = build_train_sample(&enc, &gen, &gen.schedule()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            let report = grad_check(&model, &sample, num_params, cfg.seed, corrupt)?;
            let mut csv = String::from("param,index,analytic,numeric,rel_error\n");
            for e in &report.entries {
                csv.push_str(&format!("{},{},{:e},{:e},{:e}\n", e.param, e.index, e.analytic, e.numeric, e.rel_error));
            }
            fs::write(common.out.join("gradcheck.csv"), csv)?;
            println!("max relative error {:e}", report.max_rel_error());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
