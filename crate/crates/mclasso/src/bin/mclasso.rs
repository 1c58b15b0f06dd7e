fn main() {
    std::process::exit(mclasso::cli::main_with_args(std::env::args_os()));
}
