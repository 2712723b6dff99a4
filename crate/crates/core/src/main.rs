fn main() {
    std::process::exit(apdnn::cli::run_cli(std::env::args_os()));
}
