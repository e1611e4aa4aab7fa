use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tractgraph::graph::GraphKind;
use tractgraph::model::{Baseline, Streams};
use tractgraph_cli::{commands, config, Overrides};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "tractgraph", version, about = "Fiber-cluster graphs, hybrid classification and attention reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic atlas, cohort and ground truth
    Gen(Common),
    /// Build WMG/GMG/CMG graph files
    Graph(Common),
    /// Cross-validate the classifier
    Train(Common),
    /// Select predictive clusters from a results file's attention
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        tracts: Option<PathBuf>,
    },
    /// Paired t-tests between two results files
    Compare {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
    },
    /// Train across a grid of neighbor budgets
    Sweep(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<GraphKind>)]
    graph_kind: Option<GraphKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<Streams>)]
    streams: Option<Streams>,
    #[arg(long, value_enum)]
    attention: Option<OnOff>,
    #[arg(long, value_parser = parse_from_str::<Baseline>)]
    baseline: Option<Baseline>,
    #[arg(long)]
    top_q: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_from_str<T: std::str::FromStr<Err = tractgraph::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: tractgraph::Error| e.to_string())
}

impl Common {
    fn load(&self) -> tractgraph::Result<config::Loaded> {
        let overrides = Overrides {
            seed: self.seed,
            // relative --out is taken from the working directory
            out: self.out.as_ref().map(|p| std::path::absolute(p).unwrap_or_else(|_| p.clone())),
            graph_kind: self.graph_kind,
            k: self.k,
            streams: self.streams,
            attention: self.attention.map(|a| matches!(a, OnOff::On)),
            baseline: self.baseline,
            top_q: self.top_q,
            workers: self.workers,
        };
        config::load(self.config.as_deref(), &overrides)
    }
}

fn run(command: Command) -> tractgraph::Result<Vec<PathBuf>> {
    match command {
        Command::Gen(c) => commands::cmd_gen(&c.load()?),
        Command::Graph(c) => commands::cmd_graph(&c.load()?),
        Command::Train(c) => commands::cmd_train(&c.load()?),
        Command::Interpret { common, results, tracts } => {
            commands::cmd_interpret(&common.load()?, results.as_deref(), tracts.as_deref())
        }
        Command::Compare { common, a, b } => commands::cmd_compare(&common.load()?, &a, &b),
        Command::Sweep(c) => commands::cmd_sweep(&c.load()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TGF_LOG", "info")).init();
    // clap exits 2 on usage errors and 0 for --help
    let cli = Cli::parse();
    match panic::catch_unwind(|| run(cli.command)) {
        Ok(Ok(paths)) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
        Err(_) => ExitCode::from(1),
    }
}
