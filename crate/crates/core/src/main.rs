fn main() {
    std::process::exit(tonestyle::cli::main_with_args(std::env::args_os()));
}
