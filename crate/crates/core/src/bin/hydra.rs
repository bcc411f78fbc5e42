fn main() {
    std::process::exit(hydra_core::cli::main_with_args(std::env::args_os()));
}
