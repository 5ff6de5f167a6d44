fn main() {
    std::process::exit(lll_core::cli::main_with_args(std::env::args_os()));
}
