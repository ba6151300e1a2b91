use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bode::config::{Command, RunConfig};
use bode::error::{Error, Result};
use bode::pipeline;
use bode::report;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bode", version, about = "Bayesian-optimized deep ensembles for field regression")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat JSON config, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args, Default)]
struct DataArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    nz: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// Regrid from this many scattered points with kNN.
    #[arg(long)]
    mesh_points: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    /// Relative noise standard deviation, e.g. 0.05.
    #[arg(long)]
    noise: Option<f64>,
    /// Noise smoothing width in cells.
    #[arg(long)]
    noise_filter_width: Option<f64>,
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    eval_draws: Option<usize>,
}

#[derive(Args, Default)]
struct SearchArgs {
    /// Sobol trials per member.
    #[arg(long)]
    sobol: Option<usize>,
    /// Total trials per member.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    trial_epochs: Option<usize>,
    #[arg(long)]
    n_raw: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    gp_restarts: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic field dataset.
    Generate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train and evaluate the fixed-hyperparameter ensemble.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Optimize each member's hyperparameters, then train and evaluate.
    Bode {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Recompute and compare the metrics of one or two run directories.
    Evaluate {
        #[arg(required = true, num_args = 1..=2)]
        runs: Vec<PathBuf>,
        /// Dataset directory overriding the one recorded in the manifests.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

impl DataArgs {
    fn apply(self, c: &mut RunConfig) {
        if self.data.is_some() {
            c.data = self.data;
        }
        set(&mut c.nx, self.nx);
        set(&mut c.nz, self.nz);
        set(&mut c.timesteps, self.timesteps);
        if self.mesh_points.is_some() {
            c.mesh_points = self.mesh_points;
        }
        set(&mut c.knn_k, self.knn_k);
        set(&mut c.noise, self.noise);
        set(&mut c.noise_filter_width, self.noise_filter_width);
    }
}

impl TrainArgs {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.members, self.members);
        set(&mut c.epochs, self.epochs);
        set(&mut c.width_divisor, self.width_divisor);
        set(&mut c.eval_draws, self.eval_draws);
    }
}

impl SearchArgs {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.sobol, self.sobol);
        set(&mut c.iters, self.iters);
        set(&mut c.trial_epochs, self.trial_epochs);
        set(&mut c.n_raw, self.n_raw);
        set(&mut c.mc_samples, self.mc_samples);
        set(&mut c.gp_restarts, self.gp_restarts);
    }
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::Validation("--out is required".into()))
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.jobs, g.jobs);
    match cli.command {
        Cmd::Generate { data } => {
            data.apply(&mut cfg);
            let out = out_dir(&g)?;
            let ds = pipeline::cmd_generate(&cfg, out, g.force)?;
            eprintln!("wrote {} frames of {}x{} to {}", ds.n_timesteps(), ds.grid.nx, ds.grid.nz, out.display());
        }
        Cmd::Baseline { data, train } => {
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            let out = out_dir(&g)?;
            cfg.validate(Command::Baseline)?;
            let run = pipeline::run_baseline(&cfg, Some(out), g.force)?;
            summary(&run.report);
        }
        Cmd::Bode { data, train, search } => {
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            search.apply(&mut cfg);
            let out = out_dir(&g)?;
            cfg.validate(Command::Bode)?;
            let run = pipeline::run_bode(&cfg, Some(out), g.force)?;
            summary(&run.report);
        }
        Cmd::Evaluate { runs, data } => {
            let cmp = pipeline::cmd_evaluate(&runs, data.as_ref())?;
            match &g.out {
                Some(out) => {
                    pipeline::prepare_out_dir(out, g.force)?;
                    report::write_json(&cmp, &out.join("comparison.json"))?;
                    print!("{}", pipeline::comparison_table(&cmp));
                }
                None => {
                    print!("{}", pipeline::comparison_table(&cmp));
                    println!("{}", serde_json::to_string_pretty(&cmp).map_err(Error::compute)?);
                }
            }
        }
    }
    Ok(())
}

fn summary(r: &report::RunReport) {
    let e = &r.ensemble;
    println!(
        "{} ensemble of {}: test rmse {:.6e}, r2 {:.6}, coverage 68/95 {:.3}/{:.3}, mean total std {:.6e}",
        r.command,
        r.members.len(),
        e.rmse,
        e.r2,
        e.coverage_68,
        e.coverage_95,
        e.uncertainty.mean_total_std
    );
    if let Some(n) = &r.noise_recovery {
        println!("injected noise std {:.6e}, total/injected {:.3}", n.injected_mean_std, n.total_to_injected_ratio);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
