fn main() {
    std::process::exit(sagvae::cli::run(std::env::args_os()));
}
