fn main() {
    std::process::exit(prior_bridge::cli::main_with_args(std::env::args_os()));
}
