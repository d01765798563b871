fn main() {
    std::process::exit(ssatt_cli::main_with_args(std::env::args_os().collect()));
}
