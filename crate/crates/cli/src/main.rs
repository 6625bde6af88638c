fn main() {
    std::process::exit(rdx_cli::run(std::env::args_os()));
}
