fn main() {
    std::process::exit(interact_cli::run(std::env::args_os()));
}
