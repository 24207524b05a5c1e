use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ldd_core::demos::DemoStore;
use ldd_core::env::{GridWorld, SplitSide};
use ldd_core::harness::matrix::{alpha_d_sweep, collect, model_config, pretrain_config, vae_config};
use ldd_core::harness::oracle::{oracle_suite, TOLERANCE};
use ldd_core::harness::plot::plot_files;
use ldd_core::harness::{CellResult, DemoSource, ExperimentConfig, ExperimentMatrix, HarnessError, MatrixRunner};
use ldd_core::model::{Model, TeacherSnapshot};
use ldd_core::pretrain::{pretrain_dynamics, vae_pretrain};
use ldd_core::rl::{eval_seeds, evaluate_greedy, train, Prerequisites, Variant};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "ldd", version, about = "Dynamics pretraining and representation distillation for a language gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Collect demonstrations into a DemoStore file.
    GenDemos {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// expert or random; defaults to demos.source.
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the vocabulary table here.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Pretrain the dynamics model (or the VAE) on a DemoStore.
    Pretrain {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Defaults to paths.demos.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train the observation VAE instead of the dynamics model.
        #[arg(long)]
        vae: bool,
    },
    /// Run one RL training job.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to paths.out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Greedy win rate of a checkpoint.
    Eval {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Defaults to paths.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every cell of the experiment matrix, resuming completed ones.
    Matrix {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Repeat the matrix once per distillation weight, e.g. 0.1,1,10.
        #[arg(long, value_delimiter = ',')]
        alpha_d_sweep: Vec<f64>,
    },
    /// Render learning curves from metrics CSVs as SVG.
    Plot {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "train_win_rate")]
        column: String,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Finite-difference check of every primitive and objective.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default config with documentation.
    Defaults,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn path_or(flag: Option<PathBuf>, cfg: &ExperimentConfig, key: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => Ok(PathBuf::from(cfg.require_path(key).map_err(HarnessError::from)?)),
    }
}

fn world(cfg: &ExperimentConfig) -> Result<GridWorld> {
    Ok(GridWorld::new(cfg.env.episode_config(cfg.env.language)?).map_err(HarnessError::from)?)
}

fn load_demos(path: &Path, cfg: &ExperimentConfig) -> Result<DemoStore> {
    let w = world(cfg)?;
    DemoStore::load(path, w.vocab()).map_err(HarnessError::from).with_context(|| format!("loading {}", path.display()))
}

fn load_policy(path: &Path) -> Result<Model> {
    match Model::load(path) {
        Ok((m, _)) => Ok(m),
        Err(full) => match TeacherSnapshot::load(path) {
            Ok(t) => Ok(t.to_model().map_err(HarnessError::from)?),
            Err(_) => Err(HarnessError::from(full)).with_context(|| format!("loading {}", path.display())),
        },
    }
}

fn parse_with<T: std::str::FromStr<Err = String>>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|e: String| HarnessError::Config(ldd_core::harness::ConfigError::Invalid {
        line: 0,
        key: what.into(),
        msg: e,
    }))
    .map_err(Into::into)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos {
            config,
            out,
            source,
            count,
            seed,
            vocab,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = source {
                cfg.demos.source = parse_with::<DemoSource>(&s, "--source")?;
            }
            if let Some(n) = count {
                cfg.demos.count = n;
            }
            if let Some(s) = seed {
                cfg.demos.seed = s;
            }
            let store = collect(&cfg, cfg.demos.source, cfg.env.language)?;
            store.save(&out).map_err(HarnessError::from)?;
            if let Some(v) = vocab {
                world(&cfg)?.vocab().save(&v).map_err(HarnessError::from)?;
            }
            println!(
                "{} {} demonstrations, {} transitions, win rate {:.3} -> {}",
                store.len(),
                cfg.demos.source.as_str(),
                store.n_transitions(),
                store.header.win_rate(),
                out.display()
            );
        }
        Command::Pretrain {
            config,
            demos,
            out,
            seed,
            vae,
        } => {
            let cfg = load_config(config.as_deref())?;
            let store = load_demos(&path_or(demos, &cfg, "paths.demos")?, &cfg)?;
            let mc = model_config(&cfg, cfg.env.language)?;
            let seed = seed.unwrap_or(cfg.rl.seed);
            if vae {
                let m = vae_pretrain(&store, mc, &vae_config(&cfg, seed)).map_err(HarnessError::from)?;
                m.save(&out, &[]).map_err(HarnessError::from)?;
                println!("VAE parameters -> {}", out.display());
            } else {
                let (_, teacher, report) = pretrain_dynamics(&store, mc, &pretrain_config(&cfg, seed)).map_err(HarnessError::from)?;
                teacher.save(&out).map_err(HarnessError::from)?;
                let csv = out.with_extension("csv");
                report.write_csv(&csv).map_err(HarnessError::from)?;
                println!(
                    "held-out frame accuracy {:.4} at epoch {} -> {} (report {})",
                    report.best_heldout_acc,
                    report.best_epoch,
                    out.display(),
                    csv.display()
                );
            }
        }
        Command::Train {
            config,
            variant,
            seed,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let variant = match variant {
                Some(v) => parse_with::<Variant>(&v, "--variant")?,
                None => cfg.rl.variant,
            };
            let seed = seed.unwrap_or(cfg.rl.seed);
            let out_dir = path_or(out_dir, &cfg, "paths.out_dir")?;
            let tc = cfg.train_config(variant, seed, cfg.env.language);
            tc.validate().map_err(HarnessError::from)?;
            let teacher = match variant.needs_teacher() {
                true => Some(
                    TeacherSnapshot::load(&path_or(None, &cfg, "paths.teacher")?).map_err(HarnessError::from)?,
                ),
                false => None,
            };
            let init = match variant {
                Variant::Vae => Some(load_policy(&path_or(None, &cfg, "paths.init")?)?),
                _ => None,
            };
            let demos = match variant {
                Variant::Inverse => Some(load_demos(&path_or(None, &cfg, "paths.demos")?, &cfg)?),
                _ => None,
            };
            let pre = Prerequisites {
                teacher: teacher.as_ref(),
                init: init.as_ref(),
                demos: demos.as_ref(),
            };
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
            let env = cfg.env.episode_config(cfg.env.language)?;
            let outcome = train(&tc, &env, &pre, Some(&out_dir)).map_err(HarnessError::from)?;
            let last = outcome.final_row();
            println!(
                "{variant} seed {seed}: {} frames, train win {:.3}, eval win {:.3} -> {}",
                outcome.frames,
                last.train_win_rate,
                last.eval_win_rate,
                out_dir.join("metrics.csv").display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            episodes,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            if episodes == 0 {
                bail!(HarnessError::Config(ldd_core::harness::ConfigError::Invalid {
                    line: 0,
                    key: "--episodes".into(),
                    msg: "must be positive".into(),
                }));
            }
            let model = load_policy(&path_or(checkpoint, &cfg, "paths.checkpoint")?)?;
            let side = match split {
                Split::Train => SplitSide::Train,
                Split::Eval => SplitSide::Eval,
            };
            let env = cfg.env.episode_config(cfg.env.language)?;
            let w = GridWorld::new(env.with_side(side)).map_err(HarnessError::from)?;
            let (win, ret) = evaluate_greedy(&model, &w, &eval_seeds(seed, side, episodes)).map_err(HarnessError::from)?;
            println!("win_rate {win:.6} mean_return {ret:.6} episodes {episodes}");
        }
        Command::Matrix {
            config,
            out_dir,
            workers,
            alpha_d_sweep: sweep,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(w) = workers {
                cfg.matrix.workers = w.max(1);
            }
            let out_dir = path_or(out_dir, &cfg, "paths.out_dir")?;
            let jobs = if sweep.is_empty() {
                vec![(cfg, out_dir)]
            } else {
                alpha_d_sweep(&cfg, &sweep, &out_dir)
            };
            let (mut failed, mut total) = (0, 0);
            for (cfg, out_dir) in jobs {
                let matrix = ExperimentMatrix::from_config(&cfg)?;
                let runner = MatrixRunner {
                    matrix: &matrix,
                    out_dir,
                };
                total += matrix.cells.len();
                for (cell, result) in runner.run()? {
                    match result {
                        CellResult::Ran(d) => println!("ran     {} -> {}", cell.id(), d.display()),
                        CellResult::Skipped(d) => println!("skipped {} ({} is complete)", cell.id(), d.display()),
                        CellResult::Failed(e) => {
                            failed += 1;
                            println!("failed  {}: {e}", cell.id());
                        }
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} of {total} cells failed");
            }
        }
        Command::Plot { out, column, inputs } => {
            let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let bands = plot_files(&refs, &column, &out)?;
            println!("{} variants -> {}", bands.len(), out.display());
        }
        Command::GradCheck { configs, seed } => {
            let mut bad = 0;
            for (name, r) in oracle_suite(configs.max(1), seed)? {
                let ok = r.max_rel_error < TOLERANCE;
                bad += !ok as usize;
                println!(
                    "{} {name}: max rel error {:.3e} over {} coordinates",
                    if ok { "ok  " } else { "FAIL" },
                    r.max_rel_error,
                    r.checked
                );
            }
            if bad > 0 {
                bail!("{bad} gradient checks exceeded {TOLERANCE:e}");
            }
        }
        Command::Defaults => print!("{}", ExperimentConfig::default().to_text()),
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| c.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_validation));
    if validation {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
