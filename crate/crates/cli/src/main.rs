fn main() {
    std::process::exit(cpdae_cli::run(std::env::args_os()));
}
