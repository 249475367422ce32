fn main() {
    std::process::exit(watf::cli::run(std::env::args_os()));
}
