fn main() {
    std::process::exit(pdl_core::cli::main_with_args(std::env::args_os()));
}
