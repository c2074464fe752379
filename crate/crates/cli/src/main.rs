fn main() {
    std::process::exit(affordlab_cli::run(std::env::args_os()));
}
