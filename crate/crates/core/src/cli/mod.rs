//! Command-line driver: configuration, pipelines and report files.

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{DatasetSpec, Prepared, RunConfig, Source, Tightening, TrainSpec};
pub use run::{
    bounds_report, dump_bounds, root_bounds, run_attack, run_bounds, run_certify, run_export, verify_report,
    write_dataset, write_plotdata, AttackFile, BoundsReport, Report, Seeds, Summary, TestBound, Timings,
};

use crate::data::{diabetes, iris, make_halfmoons};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "poisoncert", version, about = "Certify SGD training against data poisoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Branch-and-bound certification with report, bounds, progress, attack and plot files.
    Certify(RunArgs),
    /// Heuristic attack search only.
    Attack(RunArgs),
    /// Write the attack problem as a model file and print its census.
    Export(RunArgs),
    /// Interval bounds and big-M constants only.
    Bounds(RunArgs),
    /// Write a built-in dataset as CSV.
    GenData(GenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    /// Tighten test-logit bounds with OBBT.
    #[arg(long)]
    pub obbt: bool,
    /// Auxiliary-variable formulation.
    #[arg(long)]
    pub aux: bool,
    /// Write the nested big-M table to this file.
    #[arg(long)]
    pub dump_bounds: Option<PathBuf>,
    /// Output directory (model file path for `export`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Builtin {
    Halfmoons,
    Iris,
    Diabetes,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub dataset: Builtin,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Halfmoons only.
    #[arg(long, default_value_t = 100)]
    pub n_train: usize,
    /// Halfmoons only.
    #[arg(long, default_value_t = 40)]
    pub n_test: usize,
    /// Halfmoons only.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    /// Loads the config and applies command-line overrides.
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::config("--time-limit must be positive"));
            }
            cfg.solver.time_limit = Some(t);
        }
        if let Some(n) = self.threads {
            cfg.solver.threads = n;
        }
        cfg.solver.deterministic |= self.deterministic;
        cfg.tightening.obbt |= self.obbt;
        cfg.tightening.aux |= self.aux;
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

// a closed stdout (e.g. piped into `head`) is not an error
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Certify(a) => {
            let cfg = a.load()?;
            let r = run_certify(&cfg, &cfg.output, a.dump_bounds.as_deref())?;
            print_summary(&r, &cfg.output);
        }
        Command::Attack(a) => {
            let cfg = a.load()?;
            let r = run_attack(&cfg, &cfg.output)?;
            print_summary(&r, &cfg.output);
        }
        Command::Export(a) => {
            let cfg = a.load()?;
            let path = match &a.out {
                Some(p) => p.clone(),
                None => cfg.output.join("model.lp"),
            };
            let (_, census) = run_export(&cfg, &path, a.dump_bounds.as_deref())?;
            say!("wrote {}", path.display());
            for line in census.comment_lines() {
                say!("{line}");
            }
        }
        Command::Bounds(a) => {
            let cfg = a.load()?;
            let r = run_bounds(&cfg, &cfg.output, a.dump_bounds.as_deref())?;
            say!(
                "mode {:?} obbt {} mean test width {} max {} root bound {}",
                r.mode, r.obbt, r.mean_width, r.max_width, r.root_bound
            );
        }
        Command::GenData(g) => {
            let ds = match g.dataset {
                Builtin::Halfmoons => make_halfmoons(g.n_train, g.n_test, g.noise, g.seed)?,
                Builtin::Iris => iris(g.seed)?,
                Builtin::Diabetes => diabetes(g.seed)?,
            };
            write_dataset(&ds, &g.out)?;
            say!("wrote {} train and {} test rows to {}", ds.n_train(), ds.n_test(), g.out.display());
        }
    }
    Ok(())
}

fn print_summary(r: &Report, out: &Path) {
    let c = &r.certificate;
    say!(
        "status {:?} primal {} bound {} gap {} nodes {}",
        c.status, c.primal, c.bound, c.gap, c.provenance.nodes
    );
    if let Some(acc) = r.summary.certified_accuracy {
        say!("certified accuracy {acc}");
    }
    say!("results in {}", out.display());
}

/// Runs the command line and maps failures to exit codes: 2 for bad
/// configuration, 3 for anything else.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
