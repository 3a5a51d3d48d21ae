use std::io::Write;
use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rehab_cli::commands::{self, CalibrateArgs, CliError, LearnArgs, Metric, ServeArgs};
use rehab_cli::session::DEFAULT_DECIMATION;
use rehab_core::body_frame::Side;
use rehab_core::motion::Vec3;

/// Learn, scale, calibrate, run and inspect rehabilitation exercises.
#[derive(Parser)]
#[command(name = "rehab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Left,
    Right,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a body-frame DMP to a keypoint stream (JSON lines).
    Learn {
        keypoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "right")]
        side: SideArg,
        #[arg(long, default_value_t = 25)]
        basis: usize,
        /// Power moving-average window in frames; off when omitted.
        #[arg(long)]
        filter_window: Option<usize>,
        #[arg(long, default_value_t = 1.0, requires = "filter_window")]
        filter_power: f64,
    },
    /// Rescale a model to another limb length, optionally moving start and goal.
    Scale {
        model: PathBuf,
        #[arg(long)]
        limb_length: f64,
        /// New start position `x,y,z` in meters.
        #[arg(long, value_parser = commands::parse_point)]
        start: Option<Vec3>,
        /// New goal position `x,y,z` in meters.
        #[arg(long, value_parser = commands::parse_point)]
        goal: Option<Vec3>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Acquire baseline forces for a scenario and fit the GMR corridor.
    Calibrate {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mixture components; defaults to the scenario's calibration section.
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the pooled (s, |f|) samples as TSV.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a scenario and write its trace.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarize traces: outcome, completion, deviation, reaction, reach, rmse.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Comma-separated subset of outcome,completion,max-deviation,reaction,reach,rmse.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<Metric>,
        /// Trace whose commanded path the rmse metric compares against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario live, paced at its control rate, behind the telemetry protocol.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// TCP port for newline-delimited JSON; 0 picks a free port.
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Also accept WebSocket clients on this port.
        #[arg(long)]
        ws_port: Option<u16>,
        /// Publish every n-th tick.
        #[arg(long, default_value_t = DEFAULT_DECIMATION)]
        decimation: u32,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
        /// Record the session and write it as a trace when it stops.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Learn {
            keypoints,
            out,
            side,
            basis,
            filter_window,
            filter_power,
        } => commands::learn(&LearnArgs {
            keypoints,
            out,
            side: match side {
                SideArg::Left => Side::Left,
                SideArg::Right => Side::Right,
            },
            n_basis: basis,
            filter: filter_window.map(|w| (w, filter_power)),
        }),
        Command::Scale {
            model,
            limb_length,
            start,
            goal,
            out,
        } => commands::scale(&model, limb_length, start, goal, &out),
        Command::Calibrate {
            scenario,
            out,
            components,
            seed,
            samples,
            overrides,
        } => commands::calibrate_cmd(&CalibrateArgs {
            scenario,
            out,
            components,
            seed,
            samples,
            overrides,
        }),
        Command::Run {
            scenario,
            out,
            seed,
            overrides,
        } => commands::run(&scenario, &out, seed, &overrides),
        Command::Report {
            traces,
            metrics,
            reference,
            out,
        } => {
            let text = commands::report(&traces, &metrics, reference.as_deref())?;
            match out {
                Some(path) => std::fs::write(&path, &text)
                    .map(|_| format!("wrote {}", path.display()))
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
                None => Ok(text.trim_end().to_string()),
            }
        }
        Command::Serve {
            scenario,
            host,
            port,
            ws_port,
            decimation,
            ticks,
            trace,
            seed,
            overrides,
        } => commands::serve(
            &ServeArgs {
                scenario,
                host,
                port,
                ws_port,
                decimation,
                ticks,
                trace,
                seed,
                overrides,
            },
            |server| {
                println!("tcp listening on {}", server.tcp_addr);
                if let Some(ws) = server.ws_addr {
                    println!("ws listening on {ws}");
                }
                let _ = std::io::stdout().flush();
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
