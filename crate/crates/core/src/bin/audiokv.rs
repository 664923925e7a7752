fn main() {
    std::process::exit(audiokv::cli::run(std::env::args_os()));
}
