fn main() {
    std::process::exit(vitask_cli::run(std::env::args_os()));
}
