fn main() {
    std::process::exit(gated_detect::cli::main_with_args(std::env::args_os()));
}
