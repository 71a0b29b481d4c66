use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mpp::confmap::export_map;
use mpp::convnet::{parse_manifest, save_network, toy_network};
use mpp::harness::pipeline::{
    image_confidence_map, input_image, predict_image, stage_encode, stage_eval, stage_extract,
    stage_fit_gmm, stage_fit_pca, stage_train_svm,
};
use mpp::harness::{run_pipeline, scale_sweep, DatasetManifest, PipelineConfig, Workspace};

/// Multi-scale pyramid pooling of dense CNN activations.
#[derive(Parser, Debug)]
#[command(name = "mpp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Opts {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a preset (desk, full) before the file and overrides.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, e.g. `--set gmm_k=16`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Pooling strategy: mpp, nfk, csf, ap or mpp-sp.
    #[arg(long)]
    pool: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Cache directory; overrides MPP_CACHE_DIR.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dense multi-scale activations of every dataset image.
    Extract {
        #[command(flatten)]
        opts: Opts,
    },
    /// PCA on training descriptors.
    FitPca {
        #[command(flatten)]
        opts: Opts,
    },
    /// GMM vocabulary on projected training descriptors.
    FitGmm {
        #[command(flatten)]
        opts: Opts,
    },
    /// Pooled representation of every image.
    Encode {
        #[command(flatten)]
        opts: Opts,
    },
    /// One-vs-rest linear SVMs on the training encodings.
    TrainSvm {
        #[command(flatten)]
        opts: Opts,
    },
    /// Scores the test split and writes report.json.
    Eval {
        #[command(flatten)]
        opts: Opts,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// All stages in order, reusing cached artifacts.
    Run {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        json: bool,
    },
    /// Class scores of one image (`test:N`, `train:N` or a PGM/PPM path).
    Predict {
        input: String,
        #[command(flatten)]
        opts: Opts,
    },
    /// MPP and NFK for each scale range `1~s`.
    Sweep {
        #[command(flatten)]
        opts: Opts,
        /// Upper ends of the ranges, e.g. `1,2,3`. Default: every scale.
        #[arg(long, value_delimiter = ',')]
        ranges: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Confidence map of one image as a PGM.
    Confmap {
        #[command(flatten)]
        opts: Opts,
        input: String,
        #[arg(long)]
        class: String,
        /// Grid size `HxW`.
        #[arg(long, default_value = "16x16")]
        grid: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Writes a network file from a text manifest or the toy net.
    InitNet {
        #[command(flatten)]
        opts: Opts,
        /// Layer manifest; the built-in toy net when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Weight seed for the toy net.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Prints the resolved configuration.
    Config {
        #[command(flatten)]
        opts: Opts,
    },
}

fn load_config(cli: &Opts) -> Result<PipelineConfig> {
    let mut cfg = match &cli.preset {
        Some(p) => PipelineConfig::preset(p)?,
        None => PipelineConfig::desk_defaults(),
    };
    if let Some(path) = &cli.config {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.sets {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(p) = &cli.pool {
        cfg.set("pool", p)?;
    }
    if let Some(c) = &cli.cache {
        cfg.cache_dir = Some(c.clone());
    }
    Ok(cfg)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("grid `{s}` is not HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

impl Command {
    fn opts(&self) -> &Opts {
        match self {
            Command::Extract { opts }
            | Command::FitPca { opts }
            | Command::FitGmm { opts }
            | Command::Encode { opts }
            | Command::TrainSvm { opts }
            | Command::Eval { opts, .. }
            | Command::Run { opts, .. }
            | Command::Predict { opts, .. }
            | Command::Sweep { opts, .. }
            | Command::Confmap { opts, .. }
            | Command::InitNet { opts, .. }
            | Command::Config { opts } => opts,
        }
    }
}

fn run(command: &Command) -> Result<()> {
    let cfg = load_config(command.opts())?;
    let ws = || Workspace::new(&cfg);
    let manifest = || DatasetManifest::from_spec(&cfg.dataset);
    match command {
        Command::Extract { .. } => {
            let stats = stage_extract(&cfg, &ws()?, &manifest()?)?;
            println!(
                "{} images, {} descriptors, {} MACs",
                stats.images, stats.descriptors, stats.macs
            );
        }
        Command::FitPca { .. } => {
            let pca = stage_fit_pca(&cfg, &ws()?, &manifest()?)?;
            println!("pca {} -> {}", pca.d_in(), pca.d_out());
        }
        Command::FitGmm { .. } => {
            let gmm = stage_fit_gmm(&cfg, &ws()?, &manifest()?)?;
            println!("gmm K={} d={}", gmm.k(), gmm.d());
        }
        Command::Encode { .. } => {
            let ws = ws()?;
            stage_encode(&cfg, &ws, &manifest()?)?;
            println!(
                "{} ({} values per image)",
                ws.stage_dir("encode").display(),
                cfg.representation_len()
            );
        }
        Command::TrainSvm { .. } => {
            let model = stage_train_svm(&cfg, &ws()?, &manifest()?)?;
            println!(
                "{} classes, dim {}, lambda {:e}",
                model.n_classes(),
                model.dim(),
                model.lambda()
            );
        }
        Command::Eval { json, .. } => {
            let report = stage_eval(&cfg, &ws()?, &manifest()?)?;
            print!(
                "{}",
                if *json {
                    report.to_json()?
                } else {
                    report.table()
                }
            );
        }
        Command::Run { json, .. } => {
            let report = run_pipeline(&cfg)?;
            print!(
                "{}",
                if *json {
                    report.to_json()?
                } else {
                    report.table()
                }
            );
        }
        Command::Predict { input, .. } => {
            let image = input_image(&cfg, input)?;
            let (model, scores) = predict_image(&cfg, &ws()?, &image)?;
            for (name, s) in model.classes().iter().zip(&scores) {
                println!("{name}\t{s:.6}");
            }
            println!("predicted\t{}", model.classes()[mpp::svm::argmax(&scores)]);
        }
        Command::Sweep { ranges, json, .. } => {
            let ranges: Vec<usize> = if ranges.is_empty() {
                (1..=cfg.scales).collect()
            } else {
                ranges.clone()
            };
            let report = scale_sweep(&cfg, &ranges)?;
            print!(
                "{}",
                if *json {
                    report.to_json()?
                } else {
                    report.table()
                }
            );
        }
        Command::Confmap {
            input,
            class,
            grid,
            out,
            ..
        } => {
            let image = input_image(&cfg, input)?;
            let map = image_confidence_map(&cfg, &ws()?, &image, class, parse_grid(grid)?)?;
            export_map(&map, out)?;
            let (r, c) = map.argmax().context("map has no data")?;
            println!("{} (max at row {r}, col {c})", out.display());
        }
        Command::InitNet {
            manifest,
            seed,
            out,
            ..
        } => {
            let net = match manifest {
                Some(p) => parse_manifest(&std::fs::read_to_string(p)?)?,
                None => toy_network(*seed),
            };
            save_network(&net, out)?;
            println!(
                "{} ({} layers, input {})",
                out.display(),
                net.layers().len(),
                net.standard_size()
            );
        }
        Command::Config { .. } => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let opts = cli.command.opts();
    let level = match opts.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = opts.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(&cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
