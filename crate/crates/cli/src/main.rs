fn main() {
    std::process::exit(scatter_avatar_cli::run(std::env::args_os()));
}
