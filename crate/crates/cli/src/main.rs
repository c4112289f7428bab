fn main() {
    std::process::exit(tinyptq_cli::run(std::env::args_os()));
}
