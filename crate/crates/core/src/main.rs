fn main() {
    std::process::exit(opsdl::cli::main_with_args(std::env::args_os()));
}
