fn main() {
    std::process::exit(encor_cli::run(std::env::args_os()));
}
