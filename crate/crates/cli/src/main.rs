use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match pelab_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures; usage errors are validation failures.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match pelab_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pelab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
