fn main() {
    std::process::exit(neuralloc::cli::run(std::env::args_os()));
}
