use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mibounds::bounds::Direction;
use mibounds::energy::{IbalMode, Mcmc, Objective, TrainConfig};
use mibounds::harness::{self, rows_csv, selftest, ExperimentConfig, Grid, RowStatus, StepSize};
use mibounds::variational::Checkpoint;
use mibounds::{Error, Result};

/// Mutual information and log-partition bounds.
#[derive(Parser)]
#[command(name = "mibounds", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Chains/samples per bound: a number, a comma list, or "auto" for the
    /// worker count.
    #[arg(long = "K", global = true)]
    k: Option<String>,
    /// Annealing steps: a number or a comma list.
    #[arg(long = "T", global = true)]
    t: Option<String>,
    /// Total transitions per outer draw; with `--K auto`, sets T = budget / K.
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// linear or sigmoid.
    #[arg(long, global = true)]
    schedule: Option<String>,
    /// hmc, perfect, metropolis or exact.
    #[arg(long, global = true)]
    kernel: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured estimator and write report.csv / report.json.
    Estimate {
        /// Exit nonzero if a row failed or a bound misses the reference MI by
        /// more than 3 standard errors.
        #[arg(long)]
        check: bool,
    },
    /// Sandwich gap against T; writes sweep.csv.
    Sweep {
        /// Exit nonzero unless every gap is positive.
        #[arg(long)]
        check: bool,
    },
    /// BA / contrastive decomposition; writes decompose.csv. Exits nonzero if
    /// a contrastive term exceeds log K by more than 3 standard errors.
    Decompose,
    /// Train an MLP critic and save it as a checkpoint.
    TrainCritic {
        #[arg(long)]
        objective: String,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Hidden layer widths.
        #[arg(long, value_delimiter = ',', default_value = "256,256")]
        hidden: Vec<usize>,
        /// Also train the Gaussian proposal.
        #[arg(long)]
        train_q: bool,
        /// MINE-AIS negative chain length.
        #[arg(long, default_value_t = 10)]
        mcmc_steps: usize,
        #[arg(long, default_value_t = 20)]
        leapfrog: usize,
        #[arg(long, default_value_t = 0.02)]
        step_size: f64,
    },
    /// Multi-sample AIS evaluation of the IBAL for a critic checkpoint.
    EvalIbal {
        #[arg(long)]
        critic: PathBuf,
        /// upper or approx-lower.
        #[arg(long, default_value = "upper")]
        mode: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 20)]
        leapfrog: usize,
    },
    /// Enumeration-oracle and reduction checks.
    Selftest {
        #[arg(long, default_value_t = 5)]
        instances: u64,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
    },
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("--{what}: '{v}' is not a positive integer"))))
        .collect()
}

fn workers(g: &Global) -> usize {
    g.workers.unwrap_or_else(rayon::current_num_threads)
}

/// `K` and `T` overrides, resolving `auto` and `--budget`.
fn grids(g: &Global) -> Result<(Option<Vec<usize>>, Option<Vec<usize>>)> {
    let k = match g.k.as_deref() {
        None => None,
        Some("auto") => Some(vec![workers(g)]),
        Some(s) => Some(parse_list(s, "K")?),
    };
    let t = match (&g.t, g.budget, g.k.as_deref()) {
        (Some(s), _, _) => Some(parse_list(s, "T")?),
        (None, Some(b), Some("auto")) => Some(vec![(b / workers(g)).max(1)]),
        (None, Some(_), _) => return Err(Error::Config("--budget needs --K auto".into())),
        _ => None,
    };
    Ok((k, t))
}

fn load(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut c = ExperimentConfig::load(path)?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if g.workers.is_some() {
        c.workers = g.workers;
    }
    let (k, t) = grids(g)?;
    for e in &mut c.estimators {
        if let Some(k) = &k {
            e.k = Grid::Many(k.clone());
        }
        if let Some(t) = &t {
            e.t = Grid::Many(t.clone());
        }
        if g.schedule.is_some() {
            e.schedule = g.schedule.clone();
        }
        if g.kernel.is_some() {
            e.kernel = g.kernel.clone();
        }
    }
    if let Some(s) = &mut c.sweep {
        if let Some(k) = &k {
            s.k = Grid::Many(k.clone());
        }
        if let Some(t) = &t {
            s.t = t.clone();
        }
        if g.schedule.is_some() {
            s.schedule = g.schedule.clone();
        }
        if g.kernel.is_some() {
            s.kernel = g.kernel.clone();
        }
    }
    c.validate()?;
    Ok(c)
}

fn out_path(g: &Global, configured: Option<&PathBuf>, name: &str) -> Option<PathBuf> {
    match (&g.out, configured) {
        (Some(dir), _) => Some(dir.join(name)),
        (None, Some(p)) => Some(p.clone()),
        _ => None,
    }
}

fn emit(path: Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d)?;
            }
            std::fs::write(&p, text)?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Returns whether every assertion held.
fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::Estimate { check } => {
            let c = load(g)?;
            let r = harness::run_experiment(&c)?;
            emit(out_path(g, c.output.csv.as_ref(), "report.csv"), &r.csv_string()?)?;
            if let Some(p) = out_path(g, c.output.json.as_ref(), "report.json") {
                r.write_json(&p)?;
                eprintln!("wrote {}", p.display());
            }
            let mut ok = true;
            for row in &r.rows {
                match row.status {
                    RowStatus::Failed => {
                        eprintln!("FAILED {} K={} T={}: {}", row.estimator, row.k, row.t, row.reason);
                        ok = false;
                    }
                    RowStatus::Skipped => eprintln!("SKIPPED {} K={} T={}: {}", row.estimator, row.k, row.t, row.reason),
                    RowStatus::Ok => {
                        let (Some(v), Some(se), Some(mi)) = (row.value_nats, row.std_error_nats, row.reference_mi_nats) else {
                            continue;
                        };
                        let miss = match row.direction {
                            Some(Direction::LowerMi) if row.approximate != Some(true) => v > mi + 3.0 * se,
                            Some(Direction::UpperMi) => v < mi - 3.0 * se,
                            _ => false,
                        };
                        if miss {
                            eprintln!("VIOLATION {} K={} T={}: {v} vs reference {mi}", row.estimator, row.k, row.t);
                            ok = false;
                        }
                    }
                }
            }
            Ok(!check || ok)
        }
        Command::Sweep { check } => {
            let c = load(g)?;
            let rows = harness::sweep_gap_vs_t(&c)?;
            emit(out_path(g, None, "sweep.csv"), &rows_csv(&rows)?)?;
            Ok(!check || rows.iter().all(|r| r.gap > 0.0))
        }
        Command::Decompose => {
            let c = load(g)?;
            let rows = harness::decompose_report(&c)?;
            emit(out_path(g, None, "decompose.csv"), &rows_csv(&rows)?)?;
            Ok(rows.iter().all(|r| r.within_cap))
        }
        Command::TrainCritic { objective, steps, batch, lr, hidden, train_q, mcmc_steps, leapfrog, step_size } => {
            let c = load(g)?;
            let objective: Objective = objective.parse()?;
            let k = match grids(g)?.0.as_deref() {
                Some([k]) => *k,
                Some(_) => return Err(Error::Config("train-critic takes a single --K".into())),
                None => 10,
            };
            let cfg = TrainConfig {
                objective,
                k,
                steps,
                batch,
                lr,
                seed: c.seed,
                train_q,
                mcmc: Mcmc { m: mcmc_steps, leapfrog, eps: step_size },
                ..Default::default()
            };
            let st = harness::train_critic(&c, &cfg, &hidden)?;
            let tail = &st.losses[st.losses.len().saturating_sub(100)..];
            let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            eprintln!("{objective}: {} steps, final objective {mean:.4}, skipped {}", st.losses.len(), st.skipped);
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let ck = Checkpoint::from_critic(&st.critic, Some(c.seed), Some(&objective.to_string()));
            let path = dir.join("critic.json");
            ck.save(&path)?;
            eprintln!("wrote {}", path.display());
            Ok(true)
        }
        Command::EvalIbal { critic, mode, n, leapfrog } => {
            let c = load(g)?;
            let mode: IbalMode = mode.parse()?;
            let critic = Checkpoint::load(&critic)?.critic()?;
            let (k, t) = grids(g)?;
            let single = |v: Option<Vec<usize>>, d: usize, what: &str| match v.as_deref() {
                None => Ok(d),
                Some([x]) => Ok(*x),
                Some(_) => Err(Error::Config(format!("eval-ibal takes a single --{what}"))),
            };
            let (k, t) = (single(k, 1, "K")?, single(t, 1000, "T")?);
            let anneal = harness::AnnealSpec {
                schedule: g.schedule.clone(),
                kernel: g.kernel.clone(),
                leapfrog,
                step_size: StepSize::Auto("auto".into()),
            };
            let b = harness::eval_ibal(&c, &critic, &anneal, t, k, n.unwrap_or(c.n), mode)?;
            let (lo, hi) = b.ci95();
            let marker = if b.approximate { " (approximate)" } else { "" };
            println!("{} {}{marker}: {:.4} ± {:.4} nats, 95% CI [{lo:.4}, {hi:.4}], K={k}, T={t}, n={}", b.estimator, b.direction, b.value, b.std_error, b.n_outer);
            Ok(true)
        }
        Command::Selftest { instances, n } => {
            let checks = harness::with_workers(g.workers, || selftest::run(g.seed.unwrap_or(0), instances, n))??;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if let Some(dir) = &g.out {
                emit(Some(dir.join("selftest.json")), &serde_json::to_string_pretty(&checks)?)?;
            }
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
