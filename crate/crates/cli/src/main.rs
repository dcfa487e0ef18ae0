fn main() {
    std::process::exit(rasr_cli::run(std::env::args_os()));
}
