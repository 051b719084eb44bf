fn main() {
    std::process::exit(dmc_core::cli::main_with_args(std::env::args_os()));
}
