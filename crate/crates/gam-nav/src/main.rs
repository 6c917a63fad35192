//! Thin CLI over the staged pipeline in `gam_nav::harness`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing artifact or
//! violated precondition, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gam_nav::agent::Variant;
use gam_nav::harness::{
    stage_build_graph, stage_diag_converge, stage_eval, stage_explore, stage_sweep_k, stage_train,
    stage_train_sim, EvalStageInputs, RunConfig, TrainStageInputs,
};
use gam_nav::maze::Cell;
use gam_nav::{GamError, Result};

#[derive(Parser)]
#[command(name = "gam-nav", about = "Topological graph memory navigation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for this stage.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing; locked while running).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an exploration database in a maze.
    Explore {
        #[command(flatten)]
        common: Common,
        /// `small`, `large`, or a path to a maze file.
        #[arg(long, default_value = "small")]
        maze: String,
        /// Strip ground-truth poses from the database.
        #[arg(long)]
        blind: bool,
    },
    /// Train the similarity classifier on an exploration database.
    TrainSim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        db: PathBuf,
    },
    /// Build the topological graph from a database and classifier.
    BuildGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        db: PathBuf,
        /// Directory holding sim.ckpt / sim_meta.json.
        #[arg(long)]
        sim: PathBuf,
        #[arg(long, default_value = "small")]
        maze: String,
    },
    /// Train a navigation agent.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "small")]
        maze: String,
        /// gam, ff, ff-goal, or lstm.
        #[arg(long, default_value = "gam")]
        variant: String,
        #[arg(long)]
        sim: Option<PathBuf>,
        /// Path to graph.json.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Evaluate a trained agent.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "small")]
        maze: String,
        /// Directory holding agent.ckpt / agent_meta.json.
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Evaluate from non-spawn starting cells.
        #[arg(long)]
        novel_starts: bool,
        /// Relocate the goal to `x,y`; the agent re-localizes it on the
        /// graph without retraining.
        #[arg(long)]
        goal_cell: Option<String>,
        /// Take the mode of the policy instead of sampling.
        #[arg(long)]
        argmax: bool,
    },
    /// Convergence diagnostics of recurrent aggregation on a graph.
    DiagConverge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
    },
    /// Train/evaluate across aggregation depths K.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "small")]
        maze: String,
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        graph: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_cell(text: &str) -> Result<Cell> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(GamError::Config(format!(
            "expected goal cell as 'x,y', got '{text}'"
        )));
    }
    let x = parts[0]
        .trim()
        .parse()
        .map_err(|e| GamError::Config(format!("bad x coordinate: {e}")))?;
    let y = parts[1]
        .trim()
        .parse()
        .map_err(|e| GamError::Config(format!("bad y coordinate: {e}")))?;
    Ok(Cell::new(x, y))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Explore {
            common,
            maze,
            blind,
        } => {
            let cfg = load_config(&common.config)?;
            let m = stage_explore(&maze, &cfg, common.seed, &common.out, blind)?;
            println!("explore: {} outputs, digest {}", m.outputs.len(), m.digest);
        }
        Command::TrainSim { common, db } => {
            let cfg = load_config(&common.config)?;
            let (m, report) = stage_train_sim(&db, &cfg, common.seed, &common.out)?;
            println!(
                "train-sim: holdout accuracy {:.4}, digest {}",
                report.final_holdout_accuracy, m.digest
            );
        }
        Command::BuildGraph {
            common,
            db,
            sim,
            maze,
        } => {
            let cfg = load_config(&common.config)?;
            let m = stage_build_graph(&db, &sim, &maze, &cfg, common.seed, &common.out)?;
            println!("build-graph: {} outputs, digest {}", m.outputs.len(), m.digest);
        }
        Command::Train {
            common,
            maze,
            variant,
            sim,
            graph,
        } => {
            let cfg = load_config(&common.config)?;
            let variant: Variant = variant.parse()?;
            let inputs = TrainStageInputs {
                maze_name: &maze,
                variant,
                sim_dir: sim.as_deref(),
                graph_path: graph.as_deref(),
            };
            let (m, success) = stage_train(&inputs, &cfg, common.seed, &common.out)?;
            println!(
                "train [{}]: rolling success {:.3}, digest {}",
                variant.as_str(),
                success,
                m.digest
            );
        }
        Command::Eval {
            common,
            maze,
            agent,
            sim,
            graph,
            novel_starts,
            goal_cell,
            argmax,
        } => {
            let goal_cell = goal_cell.as_deref().map(parse_cell).transpose()?;
            let inputs = EvalStageInputs {
                maze_name: &maze,
                agent_dir: &agent,
                sim_dir: sim.as_deref(),
                graph_path: graph.as_deref(),
                novel_starts,
                goal_cell,
                argmax,
            };
            let (_, eval) = stage_eval(&inputs, common.seed, &common.out)?;
            println!(
                "eval [{}]: success rate {:.3}, score {} over {} steps",
                eval.variant, eval.success_rate, eval.score, eval.score_window_steps
            );
        }
        Command::DiagConverge { common, graph } => {
            let cfg = load_config(&common.config)?;
            let m = stage_diag_converge(&graph, &cfg, common.seed, &common.out)?;
            println!("diag-converge: digest {}", m.digest);
        }
        Command::SweepK {
            common,
            maze,
            sim,
            graph,
        } => {
            let cfg = load_config(&common.config)?;
            let m = stage_sweep_k(&maze, &sim, &graph, &cfg, common.seed, &common.out)?;
            println!("sweep-k: digest {}", m.digest);
        }
    }
    Ok(())
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
