fn main() {
    std::process::exit(bwd_hjb::cli::run_args(std::env::args_os()));
}
