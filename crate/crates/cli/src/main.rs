use std::path::PathBuf;
use std::process::ExitCode;

use amns_core::harness::{
    compare_losses, emit_plots, gradcheck_cmd, sweep_mask_ratio, train, MaskStrategy, Model, RunConfig,
    GRADCHECK_LOSSES,
};
use amns_core::metrics::RetrievalSummary;
use amns_core::seed::derive_seed;
use amns_core::synthdata::{generate_dataset, inject_noise, read_dataset, write_dataset, Split, SyntheticDataset};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amns", version, about = "Noisy image-text matching on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset directory written by `generate-data`; generated on the fly when absent.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Configuration overrides such as `--epochs=30` or `--mask-ratio=0.2`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self, cfg: &RunConfig) -> Result<SyntheticDataset> {
        Ok(match &self.data {
            Some(dir) => read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?,
            None => generate_dataset(&cfg.data, cfg.data_seed)?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, optionally with corrupted training captions.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one run and write its logs, configuration and best checkpoint.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a saved checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train across mask ratios, strategies and the configured seeds.
    SweepMaskRatio {
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.8")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "awm,random")]
        strategies: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare distribution-matching losses across noise rates and the configured seeds.
    CompareLosses {
        #[arg(long, value_delimiter = ',', default_value = "bsdm,sdm")]
        losses: Vec<String>,
        #[arg(long = "noise-rates", value_delimiter = ',', default_value = "0,0.2,0.5")]
        noise_rates: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks of every loss; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        losses: Vec<String>,
    },
    /// Render sweep summaries as data files and SVG charts.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_summary(label: &str, s: &RetrievalSummary) {
    println!(
        "{label}: rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}  mINP {:.4}",
        s.rank1, s.rank5, s.rank10, s.map, s.minp
    );
}

fn out_dir(explicit: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { out, common } => {
            let cfg = common.config()?;
            let mut ds = generate_dataset(&cfg.data, cfg.data_seed)?;
            if cfg.noise_rate > 0.0 {
                ds = inject_noise(&ds, cfg.noise_rate, derive_seed(cfg.seed, "noise", &[]))?.0;
            }
            write_dataset(&ds, &out)?;
            let noisy = ds.corruption.as_ref().map_or(0, |c| c.noisy_count());
            println!("wrote {} samples ({noisy} corrupted) to {}", ds.len(), out.display());
        }
        Command::Train { out, common } => {
            let cfg = common.config()?;
            let ds = common.dataset(&cfg)?;
            let dir = out_dir(&out, &cfg);
            let result = train(&cfg, &ds)?;
            result.log.write(&dir)?;
            result.best.save(&dir.join("best.ckpt"))?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            println!("best epoch {}", result.log.best_epoch);
            print_summary("test", &result.log.test);
            println!("test keep-set signal fraction {:.4}", result.log.test_signal_fraction);
            println!("outputs in {}", dir.display());
        }
        Command::Evaluate {
            checkpoint,
            split,
            common,
        } => {
            let cfg = common.config()?;
            let ds = common.dataset(&cfg)?;
            let split = Split::parse(&split)?;
            let model = Model::load(&cfg, &checkpoint)?;
            let result = model.evaluate(&ds, split)?;
            print_summary(split.as_str(), &result.summary);
        }
        Command::SweepMaskRatio {
            ratios,
            strategies,
            out,
            common,
        } => {
            let cfg = common.config()?;
            let ds = common.dataset(&cfg)?;
            let strategies = strategies
                .iter()
                .map(|s| MaskStrategy::parse(s))
                .collect::<amns_core::Result<Vec<_>>>()?;
            let dir = out_dir(&out, &cfg);
            let rows = sweep_mask_ratio(&cfg, &ds, &ratios, &strategies, &cfg.seeds, &dir)?;
            for r in &rows {
                println!(
                    "ratio {} {:<6} seed {}: rank1 {:.4}  mINP {:.4}  signal fraction {:.4}",
                    r.ratio,
                    r.strategy.as_str(),
                    r.seed,
                    r.test.rank1,
                    r.test.minp,
                    r.signal_fraction
                );
            }
            let plots = emit_plots(&[dir.join("sweep_summary.csv")], &dir)?;
            println!("wrote sweep tables and {} plot files to {}", plots.len(), dir.display());
        }
        Command::CompareLosses {
            losses,
            noise_rates,
            out,
            common,
        } => {
            let cfg = common.config()?;
            let ds = common.dataset(&cfg)?;
            let dir = out_dir(&out, &cfg);
            let names: Vec<&str> = losses.iter().map(String::as_str).collect();
            let rows = compare_losses(&cfg, &ds, &names, &noise_rates, &cfg.seeds, &dir)?;
            for r in &rows {
                print_summary(&format!("{} rho {} seed {}", r.loss, r.noise_rate, r.seed), &r.test);
            }
            println!("wrote {}", dir.join("compare_losses.csv").display());
        }
        Command::Gradcheck { batches, seed, losses } => {
            let names: Vec<&str> = if losses.is_empty() {
                GRADCHECK_LOSSES.to_vec()
            } else {
                losses.iter().map(String::as_str).collect()
            };
            let report = gradcheck_cmd(&names, batches, seed)?;
            print!("{}", report.render());
            return Ok(report.passed());
        }
        Command::Plot { input, out } => {
            for p in emit_plots(&input, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

