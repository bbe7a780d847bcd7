fn main() {
    s2corr_cli::init_logging();
    std::process::exit(s2corr_cli::run(std::env::args_os()));
}
