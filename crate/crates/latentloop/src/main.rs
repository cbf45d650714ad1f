fn main() {
    std::process::exit(latentloop::cli::run(std::env::args_os()));
}
