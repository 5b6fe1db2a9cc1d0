fn main() {
    std::process::exit(synthloop_cli::run(std::env::args_os()));
}
