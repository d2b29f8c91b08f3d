fn main() {
    std::process::exit(taskroute_cli::run(std::env::args_os()));
}
