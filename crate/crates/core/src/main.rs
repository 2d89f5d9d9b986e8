fn main() {
    std::process::exit(strumpl::cli::main_with_args(std::env::args_os()));
}
