fn main() {
    std::process::exit(docsync_cli::run(std::env::args_os()));
}
