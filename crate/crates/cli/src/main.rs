//! `gauss-extremes` command-line front end.

mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;

pub const SCHEMA: &str = "gauss-extremes/v1";
pub const VERSION: &str = env!("GAUSS_EXTREMES_VERSION");

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<gauss_extremes::Error> for Failure {
    fn from(e: gauss_extremes::Error) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

/// Primary output: a JSON document or raw CSV text, plus metadata that goes next to CSV.
pub enum Output {
    Json(serde_json::Value),
    Csv { text: String, meta: serde_json::Value },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let argv = match args::merge_config(argv) {
        Ok(a) => a,
        Err(f) => return fail(f),
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(Failure::usage("--threads must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(Failure { code: 3, message: format!("thread pool: {e}") });
        }
    }
    match commands::run(&cli.command).and_then(|out| write_output(out, cli.out.as_deref())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("error: {}", f.message);
    ExitCode::from(f.code)
}

fn write_output(out: Output, path: Option<&std::path::Path>) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure { code: 3, message: format!("write failed: {e}") };
    let (body, meta) = match out {
        Output::Json(v) => (serde_json::to_string_pretty(&v).expect("JSON value") + "\n", None),
        Output::Csv { text, meta } => (text, Some(meta)),
    };
    match path {
        Some(p) => {
            std::fs::write(p, body).map_err(io)?;
            if let Some(m) = meta {
                let mut side = p.as_os_str().to_owned();
                side.push(".meta.json");
                std::fs::write(side, serde_json::to_string_pretty(&m).expect("JSON value") + "\n").map_err(io)?;
            }
        }
        None => {
            std::io::stdout().write_all(body.as_bytes()).map_err(io)?;
            if let Some(m) = meta {
                eprintln!("{}", serde_json::to_string(&m).expect("JSON value"));
            }
        }
    }
    Ok(())
}
