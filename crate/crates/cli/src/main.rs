fn main() {
    std::process::exit(tila_cli::run(std::env::args_os()));
}
