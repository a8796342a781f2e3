fn main() {
    std::process::exit(ctabs_cli::run_command(std::env::args_os()));
}
