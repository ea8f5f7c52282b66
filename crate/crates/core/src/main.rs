fn main() {
    std::process::exit(hsdip::cli::main_with_args(std::env::args_os()));
}
