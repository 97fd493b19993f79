use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use platoon_harness::bench::sysid_bench;
use platoon_harness::config::{RunConfig, SysidMode};
use platoon_harness::io::{self, Checkpoint};
use platoon_harness::region::{self, Controllers};
use platoon_harness::scenario::{run_scenario, ScenarioSpec};
use platoon_harness::sim::{ControllerKind, Estimators};
use platoon_harness::train::{evaluate, train};
use platoon_harness::HarnessError;

#[derive(Debug, Parser)]
#[command(name = "platoon", version, about = "Safe PPO control of a mixed-autonomy platoon")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed. Falls back to PLATOON_SEED.
    #[arg(long, global = true, env = "PLATOON_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    safety: Option<OnOff>,
    /// `oracle` feeds the true car-following laws to the safety layer.
    #[arg(long, global = true, value_enum)]
    sysid: Option<SysidArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SysidArg {
    On,
    Off,
    Oracle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Grid {
    Coarse,
    Fine,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy; writes ppo.json or ppo_safety.json and training_log.csv.
    Train {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate a checkpoint on random disturbances; writes eval.csv.
    Eval {
        /// Defaults to the checkpoint matching --safety in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a pulse case study; writes <name>_<controller>.csv.
    Scenario {
        #[arg(long)]
        name: String,
        #[arg(long)]
        controller: ControllerKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep pulse magnitude and duration; writes region.json and region_cells.csv.
    Region {
        #[arg(long, value_enum, default_value = "coarse")]
        grid: Grid,
        /// Restrict to one scenario.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Compare the learned estimator with its linear part and RLS; writes sysid_bench.csv.
    SysidBench,
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(s) = cli.safety {
        cfg.safety.enabled = matches!(s, OnOff::On);
    }
    if let Some(m) = cli.sysid {
        cfg.sysid.mode = match m {
            SysidArg::On => SysidMode::On,
            SysidArg::Off => SysidMode::Off,
            SysidArg::Oracle => SysidMode::Oracle,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Estimators for a safety-filtered controller: the checkpoint's learned
/// ones when present, otherwise freshly pre-trained.
fn learned_estimators(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Estimators, HarnessError> {
    let pc = cfg.platoon_config();
    match &ckpt.sysid {
        Some(snap) => Ok(Estimators::from_snapshot(snap.clone(), &pc, &cfg.sysid, cfg.seed)),
        None => Estimators::pretrained(&pc, &cfg.sysid, cfg.seed),
    }
}

fn safety_estimators(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Estimators, HarnessError> {
    match cfg.sysid.mode {
        SysidMode::On => learned_estimators(cfg, ckpt),
        mode => Ok(Estimators::new(mode, &cfg.platoon_config(), &cfg.sysid, cfg.seed)),
    }
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(cli)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::Train { episodes } => {
            if let Some(n) = episodes {
                cfg.training.episodes = *n;
            }
            let t = train(&cfg)?;
            let ckpt = Checkpoint::new(cfg.seed, cfg.safety.enabled, cfg.sysid.mode, t.bundle, t.sysid);
            let path = io::checkpoint_path(out, cfg.safety.enabled);
            ckpt.save(&path)?;
            io::save_text(&out.join("training_log.csv"), &io::training_log_csv(&t.log))?;
            let collisions: usize = t.log.iter().map(|e| e.collisions).sum();
            println!("wrote {} ({} episodes, {collisions} collisions)", path.display(), t.log.len());
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| io::checkpoint_path(out, cfg.safety.enabled));
            let ckpt = Checkpoint::load(&path)?;
            let est = if ckpt.safety { Some(safety_estimators(&cfg, &ckpt)?) } else { None };
            let eps = evaluate(&cfg, &ckpt.bundle, est)?;
            io::save_text(&out.join("eval.csv"), &io::eval_csv(&eps))?;
            let n = eps.len().max(1) as f64;
            print!(
                "{}",
                io::format_metrics(&[
                    ("episodes", eps.len().to_string()),
                    ("mean_reward", io::sig6(eps.iter().map(|e| e.mean_reward).sum::<f64>() / n)),
                    ("collisions", eps.iter().filter(|e| e.collision).count().to_string()),
                ])
            );
        }
        Command::Scenario { name, controller, checkpoint } => {
            let spec = ScenarioSpec::named(name, *controller, &cfg)?;
            let (bundle, est) = match controller {
                ControllerKind::PureHdv => (None, Estimators::Zero),
                c => {
                    let path =
                        checkpoint.clone().unwrap_or_else(|| io::checkpoint_path(out, c.uses_safety()));
                    let ckpt = Checkpoint::load(&path)?;
                    let est = match c {
                        ControllerKind::Ppo => Estimators::Zero,
                        ControllerKind::PpoSafety => safety_estimators(&cfg, &ckpt)?,
                        _ => learned_estimators(&cfg, &ckpt)?,
                    };
                    (Some(ckpt.bundle), est)
                }
            };
            let r = run_scenario(&spec, &cfg, bundle.as_ref(), est)?;
            let path = out.join(format!("{name}_{controller}.csv"));
            io::save_text(&path, &io::trajectory_csv(&r.records, &cfg.platoon_config()))?;
            let m = &r.metrics;
            print!(
                "{}",
                io::format_metrics(&[
                    ("trajectory", path.display().to_string()),
                    ("collision", m.collision.to_string()),
                    ("min_spacing", m.min_spacing.iter().map(|s| io::sig6(*s)).collect::<Vec<_>>().join(" ")),
                    ("min_h_cav", io::sig6(m.min_h_cav)),
                    ("time_below_threshold", io::sig6(m.time_below_threshold)),
                    ("max_abs_u_safe", io::sig6(m.max_abs_u_safe)),
                ])
            );
        }
        Command::Region { grid, scenario } => region_command(&cfg, out, *grid, scenario.as_deref())?,
        Command::SysidBench => {
            let r = sysid_bench(&cfg)?;
            io::save_text(&out.join("sysid_bench.csv"), &io::bench_csv(&r.rows))?;
            let last = r.last();
            print!(
                "{}",
                io::format_metrics(&[
                    ("mse_combined", io::sig6(last.mse_combined)),
                    ("mse_linear", io::sig6(last.mse_linear)),
                    ("mse_rls", io::sig6(last.mse_rls)),
                ])
            );
        }
    }
    Ok(())
}

/// Sweeps with every controller whose checkpoint is in `out`.
fn region_command(cfg: &RunConfig, out: &Path, grid: Grid, only: Option<&str>) -> Result<(), HarnessError> {
    let load = |safety: bool| -> Result<Option<Checkpoint>, HarnessError> {
        match Checkpoint::load(&io::checkpoint_path(out, safety)) {
            Ok(c) => Ok(Some(c)),
            Err(HarnessError::MissingCheckpoint(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let (ppo, ppo_safety) = (load(false)?, load(true)?);
    let mut kinds = vec![ControllerKind::PureHdv];
    if ppo.is_some() {
        kinds.push(ControllerKind::Ppo);
    }
    let (safety_est, learned_est) = match &ppo_safety {
        Some(c) => {
            kinds.extend([ControllerKind::PpoSafety, ControllerKind::PpoSafetySysid]);
            (safety_estimators(cfg, c)?, Some(learned_estimators(cfg, c)?))
        }
        None => (Estimators::Zero, None),
    };
    if kinds.len() == 1 {
        log::warn!("no checkpoints in {}; sweeping pure_hdv only", out.display());
    }
    let available = Controllers {
        ppo: ppo.as_ref().map(|c| &c.bundle),
        ppo_safety: ppo_safety.as_ref().map(|c| &c.bundle),
        safety_estimators: safety_est,
        learned_estimators: learned_est,
    };
    let points = match grid {
        Grid::Coarse => cfg.region.coarse_points,
        Grid::Fine => cfg.region.fine_points,
    };
    let names: Vec<&str> = match only {
        None => vec!["s1", "s2"],
        Some(n @ ("s1" | "s2")) => vec![n],
        Some(n) => return Err(HarnessError::Config(format!("unknown scenario {n:?}; expected s1 or s2"))),
    };
    let mut grids = Vec::new();
    for name in names {
        let g = region::sweep_configured(name, points, &kinds, &available, cfg)?;
        let cells = g.magnitudes.len() * g.durations.len();
        for (c, n) in g.controllers.iter().zip(&g.stats.safe_counts) {
            println!("{name} {c}: {n}/{cells} safe cells");
        }
        if let Some(r) = g.stats.expansion_ratio {
            println!("{name} expansion ratio: {}", io::sig6(r));
        }
        if let Some(d) = g.stats.mean_safe_duration_gain {
            println!("{name} mean safe-duration gain: {} s", io::sig6(d));
        }
        grids.push(g);
    }
    io::save_text(&out.join("region.json"), &io::region_json(&grids))?;
    io::save_text(&out.join("region_cells.csv"), &io::region_cells_csv(&grids))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let HarnessError::Numerical { dump: Some(d), .. } = &e {
                let path = cli.out_dir.join("failure_dump.json");
                if io::save_text(&path, d).is_ok() {
                    eprintln!("parameters dumped to {}", path.display());
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
