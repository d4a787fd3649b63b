fn main() {
    std::process::exit(gase_cli::run(std::env::args_os()));
}
