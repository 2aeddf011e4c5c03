use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use star_core::config::key_table;
use star_core::decoder::{build_mask, BlockCausalMask};
use star_core::model::pack_images;
use star_core::separator::{dump, PackedSequence};
use star_core::training::data::{read_corpus, synthesize, write_corpus};
use star_core::training::pretrain::METRICS_FILE;
use star_core::training::{finetune, pretrain, Checkpoint};
use star_core::verify::{corrupted_mask, run_checks, VerifyContext};
use star_core::{Config, StarError};

#[derive(Parser, Debug)]
#[command(
    name = "star",
    version,
    about = "Separator-packed autoregressive pretraining for a causal state-space vision encoder"
)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable. `preset=full` switches every default.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled corpus (shapes) with a manifest.
    Gen {
        /// Output directory [default: data.dir].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pack `pack.images` corpus images into one sequence and write its dump.
    Pack {
        /// Index of the first image in the manifest.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value = "pack.bin")]
        out: PathBuf,
    },
    /// Print the header and token table of a pack dump.
    Inspect { dump: PathBuf },
    /// Render the block-causal mask as a grid of # and ·.
    InspectMask {
        /// Pack dump to read; otherwise a blank pack is built from the config.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// One row per cluster instead of one per token.
        #[arg(long)]
        clusters: bool,
    },
    /// Next-cluster pretraining on the corpus in `data.dir`.
    Pretrain {
        /// Output directory [default: pretrain.out].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Classification fine-tuning on the corpus in `data.dir`.
    Finetune {
        /// Output directory [default: finetune.out].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretraining checkpoint [default: finetune.init].
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the self-check suite.
    Verify {
        /// Run only the named checks; repeatable.
        #[arg(long)]
        check: Vec<String>,
        /// Test fixture: swap in a broken mask rule.
        #[arg(long, hide = true)]
        corrupt_mask: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Verification,
}

impl From<StarError> for Failure {
    fn from(e: StarError) -> Self {
        match e {
            StarError::Config(_)
            | StarError::UnknownStrategy { .. }
            | StarError::InvalidArgument(_)
            | StarError::NotDivisible { .. }
            | StarError::HeterogeneousGeometry(_)
            | StarError::LayoutGrouping { .. }
            | StarError::InvalidImage(_)
            | StarError::FourScanPacked => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut pairs: Vec<(String, String)> = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Vec::new(),
    };
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    Ok(Config::from_pairs(
        pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())),
    )?)
}

fn read_dump(path: &PathBuf) -> Result<PackedSequence, Failure> {
    let file = File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(dump::read(BufReader::new(file))?)
}

fn blank_pack(cfg: &Config) -> Result<PackedSequence, Failure> {
    let side = cfg.image_size;
    let blank = star_core::Image::new(
        side,
        side,
        cfg.channels,
        vec![0.0; side * side * cfg.channels],
    )?;
    Ok(pack_images(cfg, &vec![blank; cfg.pack_images])?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Gen { out } => {
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let samples = synthesize(
                cfg.gen_count,
                cfg.image_size,
                cfg.channels,
                cfg.gen_classes,
                cfg.seed,
            )?;
            write_corpus(&dir, &samples)?;
            println!("wrote {} images to {}", samples.len(), dir.display());
        }
        Command::Pack { start, out } => {
            let samples = read_corpus(&PathBuf::from(&cfg.data_dir))?;
            let end = start + cfg.pack_images;
            if end > samples.len() {
                return Err(Failure::Usage(format!(
                    "pack needs {} images from index {start}, corpus has {}",
                    cfg.pack_images,
                    samples.len()
                )));
            }
            let images: Vec<_> = samples[start..end]
                .iter()
                .map(|s| s.image.clone())
                .collect();
            let packed = pack_images(&cfg, &images)?;
            let mut w = BufWriter::new(File::create(&out)?);
            dump::write(&packed, &mut w)?;
            for (i, n) in packed.tokens_per_image().iter().enumerate() {
                println!("image {i} ({}): {n} tokens", samples[start + i].file);
            }
            println!("total: {} tokens", packed.len());
        }
        Command::Inspect { dump: path } => {
            let p = read_dump(&path)?;
            println!(
                "images {}  clusters/image {}  cluster_side {}  embed_dim {}  patch_dim {}  layout {}  value {}",
                p.images,
                p.clusters_per_image,
                p.cluster_side,
                p.embed_dim,
                p.patch_dim,
                p.layout.name(),
                p.value.name()
            );
            println!("tokens {}", p.len());
            println!("index\timage\tcluster\twithin\tkind\tposition\tgrid");
            for (i, t) in p.tokens.iter().enumerate() {
                let m = &t.meta;
                let kind = if m.is_separator { "sep" } else { "pixel" };
                let grid = m.grid.map_or("-".to_string(), |(r, c)| format!("{r},{c}"));
                println!(
                    "{i}\t{}\t{}\t{}\t{kind}\t{}\t{grid}",
                    m.image_index, m.cluster_index, m.within_cluster_index, m.position_id
                );
            }
        }
        Command::InspectMask {
            dump: path,
            clusters,
        } => {
            let packed = match path {
                Some(p) => read_dump(&p)?,
                None => blank_pack(&cfg)?,
            };
            let mut ids = packed.cluster_ids();
            if clusters {
                ids.dedup();
            }
            let mask: BlockCausalMask = build_mask(&ids)?;
            print!("{}", mask.render());
        }
        Command::Pretrain { out, resume } => {
            let samples = read_corpus(&PathBuf::from(&cfg.data_dir))?;
            let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.pre_out));
            let run = pretrain(&cfg, &images, &out, resume.as_deref())?;
            println!(
                "steps {}/{}  tokens/sequence {}  first loss {}  final loss {}",
                run.steps,
                run.total_steps,
                run.tokens_per_sequence,
                run.first_loss.map_or("-".into(), |l| format!("{l:.6}")),
                run.final_loss.map_or("-".into(), |l| format!("{l:.6}"))
            );
            println!("checkpoint {}", run.checkpoint.display());
            println!("metrics {}", out.join(METRICS_FILE).display());
        }
        Command::Finetune { out, init } => {
            let samples = read_corpus(&PathBuf::from(&cfg.data_dir))?;
            let init =
                init.or_else(|| (cfg.ft_init != "none").then(|| PathBuf::from(&cfg.ft_init)));
            let ckpt = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.ft_out));
            let run = finetune(&cfg, &samples, ckpt.as_ref(), &out)?;
            let fmt = |a: Option<f64>| a.map_or("-".into(), |a| format!("{a:.4}"));
            println!(
                "steps {}  loaded {}  train acc {:.4}  holdout acc {}  ema holdout acc {}",
                run.steps,
                run.loaded,
                run.train_accuracy,
                fmt(run.holdout_accuracy),
                fmt(run.ema_holdout_accuracy)
            );
        }
        Command::Verify {
            check,
            corrupt_mask,
        } => {
            let mut ctx = VerifyContext::new(cfg.seed);
            if corrupt_mask {
                ctx.mask_builder = corrupted_mask;
            }
            let only = (!check.is_empty()).then_some(check.as_slice());
            let outcomes = run_checks(&ctx, only);
            if outcomes.is_empty() {
                return Err(Failure::Usage(format!(
                    "no check named {}",
                    check.join(", ")
                )));
            }
            for o in &outcomes {
                println!(
                    "{} {}: {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.detail
                );
            }
            let passed = outcomes.iter().filter(|o| o.passed).count();
            println!(
                "{passed}/{} checks passed (seed {})",
                outcomes.len(),
                cfg.seed
            );
            if passed != outcomes.len() {
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cmd = Cli::command().after_help(format!("Config keys:\n{}", key_table()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
