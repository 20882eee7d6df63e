fn main() {
    std::process::exit(hsidiff::cli::run(std::env::args_os()));
}
