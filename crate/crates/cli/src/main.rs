fn main() {
    std::process::exit(evidence_da_cli::run_command(std::env::args_os()));
}
