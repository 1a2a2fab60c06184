fn main() {
    std::process::exit(sparsehead::cli::run(std::env::args_os()));
}
