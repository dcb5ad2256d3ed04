fn main() {
    std::process::exit(flowgest::cli::run(std::env::args_os()));
}
