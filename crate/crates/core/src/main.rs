fn main() {
    std::process::exit(prolik::cli::main_with_args(std::env::args_os()));
}
