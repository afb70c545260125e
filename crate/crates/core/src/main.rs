fn main() {
    env_logger::init();
    std::process::exit(leakrb::cli::run(std::env::args_os()));
}
