fn main() {
    std::process::exit(distiller::cli::run(std::env::args_os()));
}
