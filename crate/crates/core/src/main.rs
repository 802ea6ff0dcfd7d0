fn main() {
    std::process::exit(selectfusion::cli::run(std::env::args_os()));
}
