fn main() {
    std::process::exit(bloodnet_cli::run(std::env::args_os()));
}
