fn main() {
    std::process::exit(cdcit::cli::main_with_args(std::env::args_os()));
}
