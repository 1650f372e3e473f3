fn main() {
    std::process::exit(morphflow_cli::run(std::env::args_os()));
}
