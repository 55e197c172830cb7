fn main() {
    std::process::exit(fibercluster::cli::run(std::env::args_os()));
}
