use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mvdiff::denoiser::LossRecord;
use mvdiff::harness::pipeline::{format_table, SummaryRow};
use mvdiff::harness::{
    ablate_stage, eval_stage, gen_data, sample_stage, train_base_stage, train_fba_stage, ExperimentConfig, Grid,
};
use mvdiff::Error;

/// Multi-view diffusion experiments on synthetic panoramas.
#[derive(Parser, Debug)]
#[command(name = "mvdiff", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the number of ring views.
    #[arg(long, global = true)]
    views: Option<usize>,
    /// Start from the tiny smoke preset instead of the defaults.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic scene dataset.
    GenData,
    /// Train the single-view base denoiser.
    TrainBase,
    /// Train the FBA and cross-attention blocks on the frozen base.
    TrainFba,
    /// Generate the evaluation scenes with the configured noise.
    Sample,
    /// Score every sample set against ground truth.
    Eval,
    /// Run ablation sweeps and print comparison tables.
    Ablate {
        /// Grid to run: w, filter_kind, filter_direction or noise. Defaults to the configured grids.
        #[arg(long)]
        grid: Vec<String>,
    },
    /// Print the effective config.
    Config,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    if c.smoke && c.config.is_some() {
        return Err(Error::Config("--smoke and --config are mutually exclusive".into()));
    }
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if c.smoke => ExperimentConfig::smoke(),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = c.views {
        cfg.views.n = n;
        cfg.train.views_per_sample = cfg.train.views_per_sample.min(n.max(1));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(stage: &'static str, total: usize) -> impl FnMut(usize, &LossRecord) {
    let every = (total / 20).max(1);
    move |step, rec| {
        if step % every == 0 || step == total {
            eprintln!(
                "{stage} {step}/{total} ldm {:.5} xa {:.5} total {:.5}",
                rec.ldm, rec.xa, rec.total
            );
        }
    }
}

fn print_rows(title: &str, rows: &[SummaryRow]) {
    println!("## {title}\n");
    println!("{}", format_table(rows));
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let m = gen_data(&cfg)?;
            println!("wrote {} scenes to {}", m.scenes.len(), cfg.out_dir.join("data").display());
        }
        Command::TrainBase => {
            let p = train_base_stage(&cfg, progress("base", cfg.train.base_steps))?;
            println!("base model with {} parameters in {}", p.count(None), cfg.out_dir.join("base").display());
        }
        Command::TrainFba => {
            train_fba_stage(&cfg, progress("fba", cfg.train.fba_steps))?;
            println!("FBA model in {}", cfg.out_dir.join("fba").display());
        }
        Command::Sample => {
            let m = sample_stage(&cfg)?;
            println!("sampled {} scenes with {} noise", m.scene_ids.len(), m.method.name());
        }
        Command::Eval => print_rows("evaluation", &eval_stage(&cfg)?),
        Command::Ablate { grid } => {
            let grids = if grid.is_empty() {
                cfg.ablate.grids.clone()
            } else {
                grid.iter().map(|g| Grid::parse(g)).collect::<Result<Vec<_>, _>>()?
            };
            for g in grids {
                print_rows(g.name(), &ablate_stage(&cfg, g)?);
            }
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            println!("# hash {}", cfg.hash());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) | Error::Undefined(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
