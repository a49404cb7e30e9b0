fn main() {
    std::process::exit(sleepnet_cli::run_command(std::env::args_os()));
}
