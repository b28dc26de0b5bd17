fn main() {
    std::process::exit(poseinit::cli::run(std::env::args_os()));
}
