fn main() {
    std::process::exit(cofm_cli::run(std::env::args_os()));
}
