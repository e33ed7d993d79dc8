fn main() {
    std::process::exit(aatrace::cli::run(std::env::args_os()));
}
