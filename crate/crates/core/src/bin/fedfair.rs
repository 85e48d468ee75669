use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedfair::harness::{
    collect_runs, method_table, preset, run_experiment, run_sweep, write_splits, Axis, Config,
    SweepPlan, SWEEP_MD,
};
use fedfair::Result;

#[derive(Parser)]
#[command(name = "fedfair", version, about = "Federated fair prompt tuning on a frozen toy encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/val/test splits as vector files.
    GenData(Common),
    /// Run one federation and write its report.
    Run(Common),
    /// Run a grid of federations and write a comparison table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Named grid: table1, table2, table3_4 or table5.
        #[arg(long)]
        preset: Option<String>,
        /// Axis to vary when no preset is given: alpha, clients or method.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Summarise every run found under `--out`.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    clients: Option<u32>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    mu: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda1: Option<f64>,
    #[arg(long)]
    k: Option<u32>,
}

impl Common {
    fn config(&self) -> Result<Config> {
        self.config_from(Config::default())
    }

    fn config_from(&self, mut cfg: Config) -> Result<Config> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| fedfair::Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("method", self.method.clone()),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("clients", self.clients.map(|v| v.to_string())),
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("mu", self.mu.map(|v| v.to_string())),
            ("lambda1", self.lambda1.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Returns whether every run completed.
fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData(c) => {
            let cfg = c.config()?;
            write_splits(&cfg, &c.out)?;
            println!("wrote synthetic splits to {}", c.out.display());
            Ok(true)
        }
        Command::Run(c) => {
            let cfg = c.config()?;
            let report = run_experiment(&cfg, &c.out)?;
            let m = report.final_metrics();
            println!(
                "{}: a_b={:.4} phi_eq={:.4} f_global={} ({} rounds) -> {}",
                cfg.method,
                m.a_b,
                m.phi_eq,
                m.f_global.map_or("n/a".into(), |v| format!("{v:.4}")),
                report.rounds.len(),
                c.out.display()
            );
            if let Some(f) = &report.failure {
                eprintln!("run incomplete: {f}");
            }
            Ok(report.complete)
        }
        Command::Sweep {
            common,
            preset: name,
            axis,
            values,
            repeats,
        } => {
            let mut plan = match (name, axis) {
                (Some(n), None) => preset(&n)?,
                (None, Some(a)) => SweepPlan {
                    axis: a.parse::<Axis>()?,
                    values: vec![],
                    methods: vec![],
                    repeats: 1,
                    defaults: vec![],
                },
                _ => {
                    return Err(fedfair::Error::invalid("give exactly one of --preset or --axis"));
                }
            };
            if !values.is_empty() {
                plan.values = values;
            }
            if let Some(r) = repeats {
                plan.repeats = r;
            }
            let cfg = common.config_from(plan.base_config()?)?;
            let results = run_sweep(&cfg, &plan, Some(&common.out))?;
            let failed = results.iter().filter(|r| r.failed()).count();
            println!(
                "{} runs, {failed} failed -> {}",
                results.len(),
                common.out.join(SWEEP_MD).display()
            );
            Ok(failed == 0)
        }
        Command::Report(c) => {
            let rows = collect_runs(&c.out)?;
            if rows.is_empty() {
                return Err(fedfair::Error::invalid(format!(
                    "no run reports found under {}",
                    c.out.display()
                )));
            }
            let table = method_table(&rows);
            let path: &Path = &c.out.join("report.md");
            std::fs::write(path, &table).map_err(|e| fedfair::Error::io(path, e))?;
            print!("{table}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
