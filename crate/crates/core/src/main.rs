fn main() {
    std::process::exit(imconf::cli::main_with_args(std::env::args_os()));
}
