fn main() {
    std::process::exit(rcm_cli::main_with_args(std::env::args_os()));
}
