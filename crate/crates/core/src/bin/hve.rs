fn main() {
    std::process::exit(hybrid_value::cli::main_with_args(std::env::args_os()));
}
