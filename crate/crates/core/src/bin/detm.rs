fn main() {
    std::process::exit(dynamic_etm::cli::main_with_args(std::env::args_os()));
}
