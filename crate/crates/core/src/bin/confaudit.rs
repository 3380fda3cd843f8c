fn main() {
    std::process::exit(confaudit::cli::run(std::env::args_os()));
}
