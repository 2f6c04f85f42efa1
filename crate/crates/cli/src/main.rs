use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = roadfuse_cli::Cli::parse();
    match roadfuse_cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
