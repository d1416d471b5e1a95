use clap::Parser;
use depthdiff::Error;
use depthdiff_cli::{report_error, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", report_error(&Error::Usage(first)));
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", report_error(&e));
        std::process::exit(depthdiff_cli::exit_code(&e));
    }
}
