fn main() {
    std::process::exit(bigsr::cli::main_with_args(std::env::args_os()));
}
