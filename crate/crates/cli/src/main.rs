fn main() {
    std::process::exit(gap_cli::main_with_args(std::env::args_os()));
}
