fn main() {
    std::process::exit(platedpm::cli::run(std::env::args_os()));
}
