use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use scene_core::backend::conformance;
use scene_core::pipeline::{self, PipelineError, ReportFormat, RunConfig};

#[derive(Parser)]
#[command(name = "scene", version, about = "Counterfactual evaluation of token attributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every configured method and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated methods to evaluate.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, default_value = "scene-run")]
        out: PathBuf,
    },
    /// Print the report of a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::TableText)]
        format: Format,
    },
    /// Serve mock fixture tables over the wire protocol.
    MockServe {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8700")]
        addr: String,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
    /// Replay the golden wire-protocol cases against a running backend.
    Conformance {
        /// Base URL, e.g. http://127.0.0.1:8700
        #[arg(long)]
        url: String,
        /// Directory of golden case files.
        #[arg(long)]
        golden: PathBuf,
        /// Also compare response bodies against the recorded ones. Only
        /// meaningful for the mock the cases were recorded from.
        #[arg(long)]
        exact: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    TableText,
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::TableText => ReportFormat::TableText,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

fn fail(e: PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(config: PathBuf, seed: Option<u64>, methods: Option<Vec<String>>, out: PathBuf) -> ExitCode {
    let mut cfg = match RunConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    cfg.apply_env();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = methods {
        cfg.methods = m;
    }
    let output = match pipeline::run_from_config(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    if let Err(e) = pipeline::write_run_dir(&out, &output) {
        return fail(e);
    }
    print!("{}", pipeline::render_table(&output.report));
    info!("wrote {}", out.display());
    if output.report.has_failures() {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn mock_serve(fixtures: PathBuf, addr: String, threads: usize) -> anyhow::Result<()> {
    let mock = pipeline::load_mock(&fixtures)?;
    let server = scene_core::backend::server::spawn(Arc::new(mock), &addr, threads)
        .with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", server.base_url());
    server.join();
    Ok(())
}

fn conformance(url: &str, golden: &Path, exact: bool) -> anyhow::Result<ExitCode> {
    let cases = conformance::load_cases(golden).map_err(anyhow::Error::msg)?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let base = url.trim_end_matches('/');
    let mut unreachable = false;
    let results = conformance::run_suite(
        &cases,
        |ep, body| {
            let sent = agent
                .post(&format!("{base}{ep}"))
                .header("Content-Type", "application/json")
                .send(body);
            match sent {
                Ok(mut r) => {
                    let status = r.status().as_u16();
                    (status, r.body_mut().read_to_string().unwrap_or_default())
                }
                Err(e) => {
                    unreachable = true;
                    (0, e.to_string())
                }
            }
        },
        exact,
    );
    let mut failed = 0;
    for r in &results {
        match &r.outcome {
            Ok(()) => println!("PASS {}", r.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {}: {why}", r.name);
            }
        }
    }
    println!("{} of {} cases passed", results.len() - failed, results.len());
    Ok(if unreachable {
        ExitCode::from(2)
    } else if failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            methods,
            out,
        } => run(config, seed, methods, out),
        Command::Report { run_dir, format } => match pipeline::read_run_dir(&run_dir) {
            Ok(r) => {
                print!("{}", ReportFormat::from(format).render(&r));
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::MockServe {
            fixtures,
            addr,
            threads,
        } => match mock_serve(fixtures, addr, threads) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
        Command::Conformance { url, golden, exact } => match conformance(&url, &golden, exact) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
