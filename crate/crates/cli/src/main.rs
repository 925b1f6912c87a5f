use clap::Parser;

fn main() -> std::process::ExitCode {
    sacl_cli::cli::run(sacl_cli::cli::Cli::parse())
}
