fn main() {
    std::process::exit(cqkit_cli::run(std::env::args_os()));
}
