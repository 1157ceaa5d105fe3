fn main() {
    std::process::exit(hpm::cli::main_with_args(std::env::args_os()));
}
