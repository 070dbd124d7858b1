fn main() {
    std::process::exit(trajdebug::cli::run(std::env::args_os()));
}
