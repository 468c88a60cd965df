fn main() {
    std::process::exit(layerfuse_cli::run(std::env::args_os()));
}
