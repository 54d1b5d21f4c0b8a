fn main() {
    std::process::exit(otdg::cli::run(std::env::args_os()));
}
