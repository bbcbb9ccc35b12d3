//! Binary entry point; all behavior lives in [`sat::cli`].

fn main() {
    std::process::exit(sat::cli::run_cli(std::env::args()));
}
