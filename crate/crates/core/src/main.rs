fn main() {
    std::process::exit(specflow::bench::cli::run(std::env::args_os()));
}
