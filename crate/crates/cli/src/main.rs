use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sgvq_core::complexity::sweep;
use sgvq_core::config::ExperimentConfig;
use sgvq_core::csi_data::{gen_channels, ChannelSample};
use sgvq_core::formats::{encode_shape_codebook, read_dataset, round_to_f32, write_dataset, Checkpoint};
use sgvq_core::shape_quant::grassmannian_init;
use sgvq_core::trainer::{metrics_csv, Trainer};

#[derive(Parser)]
#[command(name = "sgvq", version, about = "Shape-gain VQ-VAE CSI feedback experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set quant.shape_bits=[5,4]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of train_count + val_count samples.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint and per-epoch metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Print the NMSE of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; regenerated from the checkpoint config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// 1-based level; all levels when omitted.
        #[arg(long)]
        level: Option<usize>,
    },
    /// Build a Grassmannian shape codebook and write it to disk.
    PackCodebook {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        bits: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print instrumented multiplication counts for a bit-budget sweep.
    BenchComplexity {
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        mag_bits: u32,
        #[arg(long, value_delimiter = ',', default_values_t = [6, 7, 8, 9, 10])]
        bits: Vec<u32>,
    },
    /// Merge metrics files into one NMSE / bits / multiplications table.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SGVQ_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("SGVQ_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let samples = gen_channels(&cfg.channel, cfg.data.train_count + cfg.data.val_count)?;
            write_dataset(&out, &samples).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { cfg, data, checkpoint, metrics } => {
            let cfg = cfg.load()?;
            let samples = load_or_generate(&cfg, data.as_deref())?;
            let (train, val) = split(&cfg, &samples)?;
            let mut trainer = Trainer::new(cfg)?;
            trainer.fit(train, val, &mut |_, rows| {
                for r in rows {
                    eprintln!("epoch {:4} level {} nmse {:8.3} dB", r.epoch, r.level, r.eval.nmse.db);
                }
            })?;
            Checkpoint::from_trainer(&trainer)
                .write(&checkpoint)
                .with_context(|| format!("writing {}", checkpoint.display()))?;
            std::fs::write(&metrics, metrics_csv(trainer.history()))
                .with_context(|| format!("writing {}", metrics.display()))?;
            for (l, db) in trainer.final_nmse_db().iter().enumerate() {
                println!("level {}: {db} dB", l + 1);
            }
        }
        Command::Eval { checkpoint, data, split: which, level } => {
            let ck = Checkpoint::read(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let trainer = ck.into_trainer()?;
            let cfg = trainer.config().clone();
            let samples = load_or_generate(&cfg, data.as_deref())?;
            let (train, val) = split(&cfg, &samples)?;
            let set = match which {
                Split::Train => train,
                Split::Val => val,
                Split::All => &samples[..],
            };
            let available = trainer.available_levels();
            let levels: Vec<usize> = match level {
                Some(l) if l == 0 || l > available => {
                    bail!("--level {l} outside 1..={available}")
                }
                Some(l) => vec![l],
                None => (1..=available).collect(),
            };
            let evals = trainer.evaluate(set, *levels.iter().max().unwrap())?;
            for l in levels {
                println!("level {l}: {} dB", evals[l - 1].nmse.db);
            }
        }
        Command::PackCodebook { d, bits, seed, out } => {
            let cb = grassmannian_init(d, bits, seed)?;
            std::fs::write(&out, encode_shape_codebook(&cb)?).with_context(|| format!("writing {}", out.display()))?;
            println!("{} lines in R^{d}, min chordal distance {:.6}", cb.len(), cb.min_pairwise_distance()?);
        }
        Command::BenchComplexity { d, mag_bits, bits } => {
            println!("D={d}");
            println!("{:>4} {:>5} {:>5} {:>10} {:>10} {:>8}", "B", "B_mag", "B_dir", "flat", "shape_gain", "ratio");
            for r in sweep(d, mag_bits, bits)? {
                println!(
                    "{:>4} {:>5} {:>5} {:>10} {:>10} {:>8.2}",
                    r.bits,
                    r.mag_bits,
                    r.dir_bits,
                    r.flat,
                    r.shape_gain,
                    r.ratio()
                );
            }
        }
        Command::Report { metrics, out } => report(&metrics, out.as_deref())?,
    }
    Ok(())
}

fn load_or_generate(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<ChannelSample>> {
    match data {
        Some(p) => read_dataset(p).with_context(|| format!("reading {}", p.display())),
        None => {
            // same values a gen-data round trip would give
            let mut s = gen_channels(&cfg.channel, cfg.data.train_count + cfg.data.val_count)?;
            round_to_f32(&mut s);
            Ok(s)
        }
    }
}

fn split<'a>(cfg: &ExperimentConfig, samples: &'a [ChannelSample]) -> Result<(&'a [ChannelSample], &'a [ChannelSample])> {
    let (nt, nv) = (cfg.data.train_count, cfg.data.val_count);
    if samples.len() < nt + nv {
        bail!("dataset has {} samples, config needs {}", samples.len(), nt + nv);
    }
    let dim = cfg.input_dim();
    if let Some(s) = samples.first() {
        if 2 * s.h_ad_trunc.len() != dim {
            bail!(
                "dataset samples are {}x{}, config expects n_c_trunc={} n_t={}",
                s.h_ad_trunc.nrows(),
                s.h_ad_trunc.ncols(),
                cfg.channel.n_c_trunc,
                cfg.channel.n_t
            );
        }
    }
    Ok((&samples[..nt], &samples[nt..nt + nv]))
}

/// Keeps the last epoch of every level from each file.
fn report(files: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("writing {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["run", "level", "feedback_bits", "mult_count", "nmse_db", "epoch"])?;
    for path in files {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .with_context(|| format!("{}: missing column `{name}`", path.display()))
        };
        let (c_epoch, c_level, c_bits, c_mults, c_nmse) =
            (col("epoch")?, col("level")?, col("feedback_bits")?, col("mult_count")?, col("nmse_db")?);
        let mut last: Vec<csv::StringRecord> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let level: usize = rec[c_level].parse().with_context(|| format!("{}: bad level", path.display()))?;
            if level == 0 {
                bail!("{}: level must be 1-based", path.display());
            }
            if last.len() < level {
                last.resize(level, csv::StringRecord::new());
            }
            last[level - 1] = rec;
        }
        let run = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (l, rec) in last.iter().enumerate() {
            if rec.is_empty() {
                continue;
            }
            let level = (l + 1).to_string();
            w.write_record([&run, &level, &rec[c_bits], &rec[c_mults], &rec[c_nmse], &rec[c_epoch]])?;
        }
    }
    w.flush()?;
    Ok(())
}
