fn main() {
    std::process::exit(tacit_cli::run(std::env::args_os()));
}
