use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use dynrcm_cli::{load_config, run, RunOptions};

/// Runs one dynamic random conductance experiment from a TOML config.
#[derive(Debug, Parser)]
#[command(name = "dynrcm", version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to the config, then $RCM_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Also report the Sobolev inequality with the unsquared gradient.
    #[arg(long)]
    strict_sobolev: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let opts = RunOptions {
        out_dir: args.out,
        seed_override: args.seed_override,
        threads: args.threads,
        strict_sobolev: args.strict_sobolev,
    };
    let outcome = load_config(&args.config).and_then(|cfg| run(&cfg, &opts));
    match outcome {
        Ok(out) => {
            for c in &out.report.checks {
                let mark = if c.pass { "PASS" } else { "FAIL" };
                println!("{mark} {}: {}", c.name, c.detail);
            }
            println!("wrote {} files to {}", out.files.len(), out.out_dir.display());
            let failed: Vec<_> = out.report.failed().map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed checks: {}", failed.join(", "));
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
