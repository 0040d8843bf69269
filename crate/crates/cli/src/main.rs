fn main() {
    std::process::exit(calderon_cli::run(std::env::args_os()));
}
