fn main() {
    std::process::exit(georoute::cli::run(std::env::args_os()));
}
