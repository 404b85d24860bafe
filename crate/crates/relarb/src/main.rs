fn main() {
    std::process::exit(relarb::cli::main_with_args(std::env::args_os()));
}
