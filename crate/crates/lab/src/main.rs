use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use toml::Table;

use vexp::analysis::analyze_cell;
use vexp::config::{parse_overrides, RunConfig};
use vexp::matrix::{
    cells, discount_ablation, load_matrix, run_matrix, Cell, CellStatus, MatrixReport,
};
use vexp::summary::{cell_dirs, summarize, summary_table, write_summary};
use vexp::{LabError, Result};
use vexp_core::diagnostics::AnalysisConfig;

const KEY_HELP: &str = "Any configuration key may also be given as a flag, `--key value` or `--key=value`, overriding the config file.";

#[derive(Parser)]
#[command(name = "vexp", version, about = "Value-expansion experiments", after_help = KEY_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one cell: the configuration with its first seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train every cell of a matrix file, skipping finished cells.
    Matrix {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare expansion targets with Monte-Carlo returns on checkpoints.
    Analyze {
        /// A cell directory, or a directory of cells.
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = AnalysisConfig::default().horizons)]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = AnalysisConfig::default().samples)]
        samples: usize,
        #[arg(long, default_value_t = AnalysisConfig::default().particles)]
        particles: usize,
        #[arg(long, default_value_t = AnalysisConfig::default().mc_steps)]
        mc_steps: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the matrix of a base configuration over several discounts.
    AblateGamma {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write summary.csv and summary.txt for a directory of cells.
    Summarize {
        #[arg(long)]
        root: PathBuf,
        /// Fraction of the best achievable return used as threshold.
        #[arg(long, default_value_t = 0.9)]
        fraction: f64,
    },
}

/// Splits configuration-key flags from the subcommand's own arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let takes_overrides = matches!(
        args.get(1).map(String::as_str),
        Some("run" | "matrix" | "ablate-gamma")
    );
    if !takes_overrides {
        return (args, Vec::new());
    }
    let keys = RunConfig::keys();
    let mut own = Vec::new();
    let mut over = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .map(|k| k.split('=').next().unwrap_or(k).replace('-', "_"));
        match key {
            Some(k) if keys.contains(&k) => {
                let inline = a.contains('=');
                over.push(a);
                if !inline {
                    if let Some(v) = it.next() {
                        over.push(v);
                    }
                }
            }
            _ => own.push(a),
        }
    }
    (own, over)
}

fn report(status: &CellStatus) -> String {
    match status {
        CellStatus::Finished(t) => t.clone(),
        CellStatus::Skipped => "already done".into(),
        CellStatus::Failed(e) => format!("FAILED: {e}"),
    }
}

fn run_cells(list: &[Cell], out: &Path, jobs: usize) -> Result<MatrixReport> {
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let total = list.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let progress = |c: &Cell, s: &CellStatus| {
        let n = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        eprintln!("[{n}/{total}] {}: {}", c.id(), report(s));
    };
    let rep = run_matrix(list, out, jobs, &progress);
    eprintln!(
        "{} cells, {} executed, {} failed",
        rep.cells.len(),
        rep.executed(),
        rep.failures()
    );
    Ok(rep)
}

fn execute(cmd: Cmd, overrides: &Table) -> Result<bool> {
    match cmd {
        Cmd::Run { config, out } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            let first = cells(&cfg).into_iter().next().expect("validated seeds");
            Ok(run_cells(&[first], &out, 1)?.failures() == 0)
        }
        Cmd::Matrix { config, out, jobs } => {
            let exp = load_matrix(config.as_deref(), overrides)?;
            if exp.dropped > 0 {
                eprintln!("dropped {} incompatible grid combinations", exp.dropped);
            }
            let list: Vec<Cell> = exp.configs.iter().flat_map(cells).collect();
            Ok(run_cells(&list, &out, jobs)?.failures() == 0)
        }
        Cmd::AblateGamma {
            config,
            gammas,
            out,
            jobs,
        } => {
            let base = RunConfig::load(config.as_deref(), overrides)?;
            let list: Vec<Cell> = discount_ablation(&base, &gammas)?
                .iter()
                .flat_map(cells)
                .collect();
            Ok(run_cells(&list, &out, jobs)?.failures() == 0)
        }
        Cmd::Analyze {
            root,
            horizons,
            samples,
            particles,
            mc_steps,
            jobs,
        } => {
            let acfg = AnalysisConfig {
                horizons,
                samples,
                particles,
                mc_steps,
                ..AnalysisConfig::default()
            };
            let dirs = if root.join(vexp::matrix::SNAPSHOT_FILE).is_file() {
                vec![root]
            } else {
                cell_dirs(&root)?
            };
            let mut ok = true;
            for d in dirs {
                match analyze_cell(&d, &acfg, jobs) {
                    Ok(rows) => eprintln!("{}: {} checkpoints analysed", d.display(), rows.len()),
                    Err(e) => {
                        eprintln!("{}: FAILED: {e}", d.display());
                        ok = false;
                    }
                }
            }
            Ok(ok)
        }
        Cmd::Summarize { root, fraction } => {
            let rows = summarize(&root, fraction)?;
            write_summary(&root, &rows)?;
            print!("{}", summary_table(&rows));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let (own, over) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(own) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = parse_overrides(&over).and_then(|o| execute(cli.cmd, &o));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
