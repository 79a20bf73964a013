fn main() {
    std::process::exit(hsib_bench::cli::run(std::env::args_os()));
}
