use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use qosearch_core::harness::{load_scenario, run, write_outputs, Mode, RunOptions, PRESET_NAMES};
use qosearch_core::KnowledgeBase;

#[derive(Parser)]
#[command(name = "qosearch", version, about = "Simulated VoIP quality control runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Calibrate,
    Control,
    Baseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Calibrate => Mode::Calibrate,
            ModeArg::Control => Mode::Control,
            ModeArg::Baseline => Mode::Baseline,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its output files.
    Run {
        /// Preset name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "control")]
        mode: ModeArg,
        /// Overrides the scenario's learning flag.
        #[arg(long, value_enum)]
        learning: Option<Switch>,
        /// Starting knowledge base (defaults to the bundled one).
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, env = "QOS_SIM_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// List the built-in scenarios.
    Presets,
    /// Print a scenario as JSON.
    Show { scenario: String },
}

fn main() -> anyhow::Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
        Command::Show { scenario } => println!("{}", load_scenario(&scenario)?.to_json()),
        Command::Run {
            scenario,
            seed,
            mode,
            learning,
            kb,
            out,
        } => {
            let sc = load_scenario(&scenario)?;
            let mut opts = RunOptions::new(seed, mode.into());
            opts.learning = learning.map(|s| matches!(s, Switch::On));
            if let Some(path) = kb {
                let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                opts.kb = Some(KnowledgeBase::from_json(&text)?);
            }
            let art = run(&sc, opts)?;
            art.validate()?;
            let files = write_outputs(&art, &out)?;
            info!("wrote {}", files.dir.display());
            for c in &art.summary.calls {
                println!(
                    "call {}: delay {} ms, loss {}, mos {}, satisfied windows {}/{}",
                    c.call_id,
                    fmt_opt(c.avg_delay_ms, 1),
                    fmt_opt(c.avg_loss, 4),
                    fmt_opt(c.mos, 2),
                    c.satisfied_windows,
                    c.windows
                );
            }
            println!("output: {}", files.dir.display());
            if art.mode == Mode::Control && !art.summary.constraints_met {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}
