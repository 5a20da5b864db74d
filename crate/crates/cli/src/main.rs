use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use hg_cli::{Cli, run};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("HG_LOG").unwrap_or_else(|_| "warn,hg_ctm=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let json = cli.json;
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(out) => {
            // A closed pipe downstream is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{}", out.render(json));
            ExitCode::SUCCESS
        }
        Err(e) => {
            if json {
                let (code, message) = match &e {
                    hg_cli::CliError::Usage(m) => ("USAGE", m.clone()),
                    hg_cli::CliError::Hg(h) => (h.code.as_str(), h.message.clone()),
                };
                eprintln!("{}", serde_json::json!({"error": {"code": code, "message": message}}));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
