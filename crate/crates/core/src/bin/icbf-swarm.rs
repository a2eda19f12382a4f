fn main() {
    std::process::exit(icbf_swarm::cli::run_cli(std::env::args_os()));
}
